#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace calsuffix {

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

// Dense token table with a greedy longest-match tokenizer. Token strings are
// stored verbatim, so " yes" and "yes" are different tokens.
class Vocabulary {
 public:
  struct Specials {
    std::optional<TokenId> bos;
    std::optional<TokenId> eos;
    std::optional<TokenId> pad;
  };

  // `special` lists ids that are control tokens (BOS/EOS/PAD, chat
  // delimiters); they are never produced by tokenize() except when their
  // literal text appears in the input.
  Vocabulary(std::vector<std::string> tokens, Specials specials, std::vector<TokenId> control = {});

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::optional<TokenId> find(std::string_view text) const;

  // Throws UnknownToken when some byte position matches no token.
  TokenIds tokenize(std::string_view text) const;
  std::string detokenize(std::span<const TokenId> ids) const;

  const Specials& specials() const { return specials_; }
  bool is_control(TokenId id) const;
  std::uint64_t fingerprint() const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  Specials specials_;
  std::vector<bool> control_;
  std::size_t max_token_bytes_ = 0;
};

// S(y) for every label of one task, with token realizations under a given
// vocabulary. Labels are referred to by index into `labels`.
struct LabelSurfaceMap {
  std::vector<std::string> labels;
  std::vector<std::vector<std::string>> surfaces;
  std::vector<std::vector<TokenIds>> surface_ids;

  static LabelSurfaceMap build(const Vocabulary& vocab, std::vector<std::string> labels,
                               std::vector<std::vector<std::string>> surfaces);
  std::size_t num_labels() const { return labels.size(); }
};

// Predicates deciding which vocabulary entries may never appear in a suffix,
// in addition to every label-surface token.
struct MaskPolicy {
  bool forbid_special = false;     // BOS/EOS/PAD and other control ids
  bool forbid_whitespace = false;  // empty or whitespace-only tokens
  bool forbid_disallowed_chars = false;
  // Allowed byte range for forbid_disallowed_chars; default is printable
  // ASCII plus space.
  char allowed_min = ' ';
  char allowed_max = '~';
  std::vector<std::string> extra_forbidden;  // tokenized, every id masked

  // Default policy for real runs: all three predicates on.
  static MaskPolicy standard();
  bool trivial() const;
};

class ForbidMask {
 public:
  ForbidMask() = default;
  explicit ForbidMask(std::vector<bool> bits);

  std::size_t size() const { return bits_.size(); }
  bool forbidden(TokenId id) const { return bits_.at(static_cast<std::size_t>(id)); }
  std::size_t num_allowed() const;
  std::vector<TokenId> allowed_ids() const;
  const std::vector<bool>& bits() const { return bits_; }
  std::uint64_t fingerprint() const;

 private:
  std::vector<bool> bits_;
};

// Union of all label-surface tokens across `surface_maps` plus policy
// predicates. Throws AllForbidden when nothing is left.
ForbidMask build_forbid_mask(const Vocabulary& vocab, std::span<const LabelSurfaceMap> surface_maps,
                             const MaskPolicy& policy);

// Absolute positions of the surface tokens in prefix ∥ surface.
std::vector<std::size_t> label_token_positions(std::span<const TokenId> prefix_ids,
                                               std::span<const TokenId> surface_ids);

TokenIds tokenize_surface(const Vocabulary& vocab, std::string_view surface);

// Bundled word-level vocabulary used by the toy backends (V = 64).
Vocabulary toy_vocabulary();
// 12-token vocabulary small enough for exhaustive suffix enumeration.
Vocabulary tiny_vocabulary();

}  // namespace calsuffix
