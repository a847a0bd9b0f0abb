#include "metaforge/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "metaforge/errors.hpp"

namespace metaforge {
namespace {

constexpr char kMagic[4] = {'M', 'F', 'C', 'K'};
constexpr std::uint8_t kDtypeF64 = 1;

template <typename T>
void put(std::string& out, T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    out.append(bytes.data(), bytes.size());
  } else {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
  }
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    if constexpr (std::endian::native == std::endian::big) {
      std::array<char, sizeof(T)> b;
      std::memcpy(b.data(), bytes_.data() + pos_, sizeof(T));
      std::reverse(b.begin(), b.end());
      v = std::bit_cast<T>(b);
    } else {
      std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    }
    pos_ += sizeof(T);
    return v;
  }

  std::string take(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

void put_entry(std::string& out, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put<std::uint8_t>(out, kDtypeF64);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
  for (double v : t.data()) put<double>(out, v);
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, Checkpoint::kVersion);
  const nlohmann::ordered_json header = {
      {"net", ckpt.config.to_json()}, {"n_params", ckpt.params.size()}, {"meta", ckpt.meta}};
  const std::string js = header.dump();
  put<std::uint64_t>(out, js.size());
  out += js;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.size() + ckpt.optimizer.size()));
  for (const auto& e : ckpt.params) put_entry(out, e.name, e.value);
  for (const auto& e : ckpt.optimizer) put_entry(out, e.name, e.value);
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.take(4) != std::string(kMagic, 4)) throw CheckpointError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != Checkpoint::kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));

  Checkpoint ckpt;
  std::size_t n_params = 0;
  try {
    const auto json_len = r.get<std::uint64_t>();
    if (json_len > bytes.size()) throw CheckpointError("checkpoint header length out of range");
    const auto header = nlohmann::ordered_json::parse(r.take(static_cast<std::size_t>(json_len)));
    ckpt.config = NetConfig::from_json(header.at("net"));
    n_params = header.at("n_params").get<std::size_t>();
    ckpt.meta = header.value("meta", nlohmann::ordered_json::object());
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint header: ") + e.what());
  } catch (const ContractViolation& e) {
    throw CheckpointError(std::string("checkpoint header: ") + e.what());
  }

  const auto n_entries = r.get<std::uint32_t>();
  if (n_entries < n_params) throw CheckpointError("checkpoint holds fewer entries than parameters");
  for (std::uint32_t i = 0; i < n_entries; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name = r.take(name_len);
    if (r.get<std::uint8_t>() != kDtypeF64) throw CheckpointError("entry '" + name + "': unsupported dtype");
    const auto ndim = r.get<std::uint32_t>();
    if (ndim > 8) throw CheckpointError("entry '" + name + "': implausible rank " + std::to_string(ndim));
    Shape shape(ndim);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = static_cast<std::size_t>(r.get<std::uint64_t>());
      if (d != 0 && count > bytes.size() / d) throw CheckpointError("entry '" + name + "': shape too large");
      count *= d;
    }
    if (count > bytes.size() / sizeof(double)) throw CheckpointError("entry '" + name + "': shape too large");
    std::vector<double> data(count);
    for (double& v : data) v = r.get<double>();
    try {
      (i < n_params ? ckpt.params : ckpt.optimizer).add(std::move(name), Tensor(std::move(shape), std::move(data)));
    } catch (const ContractViolation& e) {
      throw CheckpointError(e.what());
    }
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint entries");

  const ParamSet expected = init_params(ckpt.config, 0);
  if (!ckpt.params.same_layout(expected)) {
    std::string detail;
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (i >= ckpt.params.size()) {
        detail = "missing '" + expected[i].name + "'";
        break;
      }
      if (ckpt.params[i].name != expected[i].name || ckpt.params[i].value.shape() != expected[i].value.shape()) {
        detail = "'" + ckpt.params[i].name + "' " + shape_str(ckpt.params[i].value.shape()) + " vs expected '" +
                 expected[i].name + "' " + shape_str(expected[i].value.shape());
        break;
      }
    }
    if (detail.empty()) detail = "unexpected extra parameters";
    throw CheckpointError("checkpoint parameters do not match config: " + detail);
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  const std::string bytes = serialize_checkpoint(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace metaforge
