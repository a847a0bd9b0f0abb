#include "metaforge/mutenc.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <limits>

#include "metaforge/errors.hpp"

namespace metaforge {
namespace {

bool is_upper_letter(char c) { return c >= 'A' && c <= 'Z'; }

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

void finish(TokenSequence& out, std::size_t max_len) {
  if (out.ids.size() > max_len) out.ids.resize(max_len);
  out.mask.assign(out.ids.size(), 1);
  out.ids.resize(max_len, Vocabulary::kPad);
  out.mask.resize(max_len, 0);
}

void check_max_len(std::size_t max_len) {
  if (max_len < 1) throw ContractViolation("encode: max_len must be at least 1");
}

}  // namespace

bool is_standard_residue(char c) noexcept { return kAminoAcids.find(c) != std::string_view::npos; }

Vocabulary::Vocabulary() {
  tokens_ = {"[PAD]", "[CLS]", "[SEP]", "[UNK]"};
  for (char c : kAminoAcids) tokens_.emplace_back(1, c);
  std::fill(std::begin(by_char_), std::end(by_char_), kUnk);
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].size() == 1) by_char_[static_cast<unsigned char>(tokens_[i][0])] = static_cast<int>(i);
  }
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary v;
  return v;
}

int Vocabulary::id(char c) const noexcept {
  const auto u = static_cast<unsigned char>(c);
  return u < 128 ? by_char_[u] : kUnk;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write vocabulary to " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read vocabulary from " + path.string());
  Vocabulary v;
  v.tokens_.clear();
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) v.tokens_.push_back(line);
  }
  const Vocabulary& ref = standard();
  if (v.tokens_ != ref.tokens_) {
    throw FormatError("vocabulary file " + path.string() + " does not match the fixed token set");
  }
  return ref;
}

std::string Mutation::to_string() const { return original + std::to_string(position) + replacement; }

Mutation parse_mutation(std::string_view raw) {
  const std::string_view text = trim(raw);
  const auto fail = [&](const std::string& why) -> Mutation {
    throw ParseError("bad mutation '" + std::string(raw) + "': " + why);
  };
  if (text.size() < 3) return fail("expected LETTER DIGITS LETTER");
  const char orig = text.front();
  const char repl = text.back();
  const std::string_view digits = text.substr(1, text.size() - 2);
  if (!is_upper_letter(orig) || !is_upper_letter(repl)) return fail("expected LETTER DIGITS LETTER");
  if (!std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    return fail("position must be decimal digits");
  }
  if (!is_standard_residue(orig)) return fail(std::string("'") + orig + "' is not a standard amino acid");
  if (!is_standard_residue(repl)) return fail(std::string("'") + repl + "' is not a standard amino acid");
  std::size_t pos = 0;
  const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), pos);
  if (ec != std::errc{} || ptr != digits.data() + digits.size()) return fail("position out of range");
  if (pos < 1) return fail("positions are 1-based");
  if (orig == repl) return fail("original and replacement are identical");
  return Mutation{orig, pos, repl};
}

std::vector<Mutation> parse_mutation_list(std::string_view text) {
  std::vector<Mutation> out;
  if (trim(text).empty()) return out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find(';', start), text.size());
    out.push_back(parse_mutation(text.substr(start, end - start)));
    start = end + 1;
  }
  std::stable_sort(out.begin(), out.end(), [](const Mutation& a, const Mutation& b) { return a.position < b.position; });
  for (std::size_t i = 1; i < out.size(); ++i) {
    if (out[i].position == out[i - 1].position) {
      throw ParseError("bad mutation list '" + std::string(text) + "': position " + std::to_string(out[i].position) +
                       " appears twice");
    }
  }
  return out;
}

std::string canonical_mutation_string(const std::vector<Mutation>& muts) {
  std::string out;
  for (std::size_t i = 0; i < muts.size(); ++i) {
    if (i) out += ';';
    out += muts[i].to_string();
  }
  return out;
}

void validate_against_sequence(std::string_view seq, const std::vector<Mutation>& muts) {
  if (seq.empty()) throw ValidationError("empty sequence");
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!is_standard_residue(seq[i])) {
      throw ValidationError("non-standard residue '" + std::string(1, seq[i]) + "' at position " +
                            std::to_string(i + 1));
    }
  }
  for (const Mutation& m : muts) {
    if (m.position < 1 || m.position > seq.size()) {
      throw ValidationError("mutation " + m.to_string() + ": position " + std::to_string(m.position) +
                            " outside sequence of length " + std::to_string(seq.size()));
    }
    const char found = seq[m.position - 1];
    if (found != m.original) {
      throw ValidationError("mutation " + m.to_string() + ": position " + std::to_string(m.position) + " expected '" +
                            std::string(1, m.original) + "', found '" + std::string(1, found) + "'");
    }
  }
}

std::size_t TokenSequence::active() const noexcept {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
}

std::string_view to_string(EncoderMode mode) { return mode == EncoderMode::kEnhanced ? "enhanced" : "standard"; }

EncoderMode parse_encoder_mode(std::string_view text) {
  if (text == "enhanced") return EncoderMode::kEnhanced;
  if (text == "standard") return EncoderMode::kStandard;
  throw ContractViolation("unknown encoder mode '" + std::string(text) + "' (expected enhanced|standard)");
}

TokenSequence encode_standard(std::string_view seq, std::string_view mut_text, const Vocabulary& vocab,
                              std::size_t max_len) {
  check_max_len(max_len);
  validate_against_sequence(seq, {});
  TokenSequence out;
  out.ids.reserve(seq.size() + mut_text.size() + 2);
  out.ids.push_back(Vocabulary::kCls);
  for (char c : seq) out.ids.push_back(vocab.id(c));
  out.ids.push_back(Vocabulary::kSep);
  for (char c : mut_text) out.ids.push_back(vocab.id(c));
  finish(out, max_len);
  return out;
}

std::vector<std::string> mutation_segments(std::string_view seq, const std::vector<Mutation>& muts) {
  std::vector<std::string> segs;
  std::size_t from = 0;
  for (const Mutation& m : muts) {
    segs.emplace_back(seq.substr(from, m.position - 1 - from));
    from = m.position;
  }
  segs.emplace_back(seq.substr(from));
  return segs;
}

TokenSequence encode_enhanced(std::string_view seq, const std::vector<Mutation>& muts_in, const Vocabulary& vocab,
                              std::size_t max_len) {
  check_max_len(max_len);
  std::vector<Mutation> muts = muts_in;
  std::stable_sort(muts.begin(), muts.end(), [](const Mutation& a, const Mutation& b) { return a.position < b.position; });
  validate_against_sequence(seq, muts);

  const std::size_t n = seq.size();
  const std::size_t k = muts.size();
  std::vector<char> is_site(n, 0);
  for (const Mutation& m : muts) is_site[m.position - 1] = 1;

  // Residues kept in the layout; everything but the sites when it fits.
  std::vector<char> keep(n, 0);
  for (std::size_t i = 0; i < n; ++i) keep[i] = !is_site[i];
  const std::size_t fixed = 1 + 5 * k;
  if (k > 0 && fixed + (n - k) > max_len) {
    const std::size_t budget = max_len > fixed ? max_len - fixed : 0;
    std::vector<std::pair<std::size_t, std::size_t>> by_distance;  // (distance to nearest site, index)
    by_distance.reserve(n - k);
    std::size_t next = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (is_site[i]) continue;
      while (next < k && muts[next].position - 1 < i) ++next;
      std::size_t d = std::numeric_limits<std::size_t>::max();
      if (next < k) d = muts[next].position - 1 - i;
      if (next > 0) d = std::min(d, i - (muts[next - 1].position - 1));
      by_distance.emplace_back(d, i);
    }
    std::sort(by_distance.begin(), by_distance.end());
    std::fill(keep.begin(), keep.end(), 0);
    for (std::size_t j = 0; j < std::min(budget, by_distance.size()); ++j) keep[by_distance[j].second] = 1;
  }

  TokenSequence out;
  out.ids.reserve(fixed + n);
  out.ids.push_back(Vocabulary::kCls);
  std::size_t from = 0;
  for (const Mutation& m : muts) {
    for (std::size_t i = from; i < m.position - 1; ++i) {
      if (keep[i]) out.ids.push_back(vocab.id(seq[i]));
    }
    out.ids.push_back(Vocabulary::kSep);
    out.ids.push_back(vocab.id(m.original));
    out.ids.push_back(Vocabulary::kSep);
    out.ids.push_back(vocab.id(m.replacement));
    out.ids.push_back(Vocabulary::kSep);
    from = m.position;
  }
  for (std::size_t i = from; i < n; ++i) {
    if (keep[i]) out.ids.push_back(vocab.id(seq[i]));
  }
  finish(out, max_len);
  return out;
}

TokenSequence encode(EncoderMode mode, std::string_view seq, const std::vector<Mutation>& muts,
                     const Vocabulary& vocab, std::size_t max_len) {
  if (mode == EncoderMode::kEnhanced) return encode_enhanced(seq, muts, vocab, max_len);
  validate_against_sequence(seq, muts);
  return encode_standard(seq, canonical_mutation_string(muts), vocab, max_len);
}

std::vector<std::string> token_strings(const TokenSequence& seq, const Vocabulary& vocab) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    if (seq.mask[i]) out.push_back(vocab.token(seq.ids[i]));
  }
  return out;
}

std::string render_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  bool in_run = false;
  for (const auto& t : tokens) {
    const bool residue = t.size() == 1;
    if (!out.empty() && !(residue && in_run)) out += ' ';
    out += t;
    in_run = residue;
  }
  return out;
}

}  // namespace metaforge
