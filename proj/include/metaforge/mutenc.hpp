#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace metaforge {

/// The 20 proteinogenic amino acids in vocabulary order.
inline constexpr std::string_view kAminoAcids = "ACDEFGHIKLMNPQRSTVWY";

bool is_standard_residue(char c) noexcept;

/// Fixed token vocabulary: four specials followed by the 20 amino acids.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kSep = 2;
  static constexpr int kUnk = 3;

  Vocabulary();

  static const Vocabulary& standard();

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  /// Id of a single residue character; anything outside the alphabet is [UNK].
  int id(char c) const noexcept;

  /// One token per line, in id order.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

 private:
  std::vector<std::string> tokens_;
  int by_char_[128];
};

struct Mutation {
  char original = 'A';
  std::size_t position = 1;  // 1-based
  char replacement = 'A';

  std::string to_string() const;
  friend bool operator==(const Mutation&, const Mutation&) = default;
};

/// Parses LETTER DIGITS LETTER, e.g. "R10A".
Mutation parse_mutation(std::string_view text);

/// Parses a ';'-separated list, sorted ascending by position. Empty text gives an empty list.
std::vector<Mutation> parse_mutation_list(std::string_view text);

/// ';'-joined form of an already sorted list.
std::string canonical_mutation_string(const std::vector<Mutation>& muts);

/// Throws ValidationError unless the sequence is standard-alphabet and every
/// mutation's original residue matches the sequence at its position.
void validate_against_sequence(std::string_view seq, const std::vector<Mutation>& muts);

struct TokenSequence {
  std::vector<int> ids;
  std::vector<int> mask;

  std::size_t length() const noexcept { return ids.size(); }
  std::size_t active() const noexcept;
  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

enum class EncoderMode { kEnhanced, kStandard };

std::string_view to_string(EncoderMode mode);
EncoderMode parse_encoder_mode(std::string_view text);

/// [CLS] sequence [SEP] raw mutation text, one token per character; tail-truncated, then padded.
TokenSequence encode_standard(std::string_view seq, std::string_view mut_text, const Vocabulary& vocab,
                              std::size_t max_len);

/// [CLS] seg0 [SEP] orig1 [SEP] repl1 [SEP] seg1 ... segk, with mutation-centred
/// truncation when the layout exceeds max_len. Validates first.
TokenSequence encode_enhanced(std::string_view seq, const std::vector<Mutation>& muts, const Vocabulary& vocab,
                              std::size_t max_len);

TokenSequence encode(EncoderMode mode, std::string_view seq, const std::vector<Mutation>& muts,
                     const Vocabulary& vocab, std::size_t max_len);

/// The k+1 sequence pieces between (sorted) mutation sites, mutated residues removed.
std::vector<std::string> mutation_segments(std::string_view seq, const std::vector<Mutation>& muts);

/// Token strings for the non-padding part of a sequence.
std::vector<std::string> token_strings(const TokenSequence& seq, const Vocabulary& vocab);

/// Compact display form: runs of residue tokens are joined, special tokens stand alone,
/// e.g. "[CLS] SSGGSSILD [SEP] R [SEP] A [SEP] AVIEHNLLSAS".
std::string render_tokens(const std::vector<std::string>& tokens);

/// Minimum residues kept on each side of a site under truncation, when the budget allows.
inline constexpr std::size_t kMinMutationFlank = 32;

}  // namespace metaforge
