#include "calsuffix/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <set>

#include "calsuffix/error.hpp"
#include "calsuffix/hash.hpp"

namespace calsuffix {

Vocabulary::Vocabulary(std::vector<std::string> tokens, Specials specials,
                       std::vector<TokenId> control)
    : tokens_(std::move(tokens)), specials_(specials), control_(tokens_.size(), false) {
  if (tokens_.empty()) throw ConfigError("vocabulary must not be empty");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw ConfigError("vocabulary token " + std::to_string(i) + " is empty");
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) throw ConfigError("duplicate vocabulary token \"" + tokens_[i] + "\"");
    max_token_bytes_ = std::max(max_token_bytes_, tokens_[i].size());
  }
  auto mark = [&](std::optional<TokenId> id) {
    if (!id) return;
    if (*id < 0 || static_cast<std::size_t>(*id) >= tokens_.size()) {
      throw ConfigError("special token id out of range");
    }
    control_[static_cast<std::size_t>(*id)] = true;
  };
  mark(specials_.bos);
  mark(specials_.eos);
  mark(specials_.pad);
  for (TokenId id : control) mark(id);
}

std::optional<TokenId> Vocabulary::find(std::string_view text) const {
  auto it = index_.find(std::string(text));
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

TokenIds Vocabulary::tokenize(std::string_view text) const {
  TokenIds ids;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t len = std::min(max_token_bytes_, text.size() - pos);
    for (; len > 0; --len) {
      auto it = index_.find(std::string(text.substr(pos, len)));
      if (it != index_.end()) {
        ids.push_back(it->second);
        break;
      }
    }
    if (len == 0) throw UnknownToken(std::string(text), pos);
    pos += len;
  }
  return ids;
}

std::string Vocabulary::detokenize(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += token(id);
  return out;
}

bool Vocabulary::is_control(TokenId id) const { return control_.at(static_cast<std::size_t>(id)); }

std::uint64_t Vocabulary::fingerprint() const {
  Fnv1a h;
  for (const auto& t : tokens_) {
    h.update(t);
    h.update_value<char>('\0');
  }
  for (bool c : control_) h.update_value<char>(c ? 1 : 0);
  return h.digest();
}

LabelSurfaceMap LabelSurfaceMap::build(const Vocabulary& vocab, std::vector<std::string> labels,
                                       std::vector<std::vector<std::string>> surfaces) {
  if (labels.empty()) throw ConfigError("label set is empty");
  if (labels.size() != surfaces.size()) throw ConfigError("every label needs a surface list");
  LabelSurfaceMap map;
  for (std::size_t y = 0; y < labels.size(); ++y) {
    if (surfaces[y].empty()) throw ConfigError("label \"" + labels[y] + "\" has no surfaces");
    std::set<std::string> seen;
    std::vector<TokenIds> ids;
    for (const auto& s : surfaces[y]) {
      if (!seen.insert(s).second) {
        throw ConfigError("label \"" + labels[y] + "\" repeats surface \"" + s + "\"");
      }
      ids.push_back(tokenize_surface(vocab, s));
    }
    map.surface_ids.push_back(std::move(ids));
  }
  map.labels = std::move(labels);
  map.surfaces = std::move(surfaces);
  return map;
}

MaskPolicy MaskPolicy::standard() {
  MaskPolicy p;
  p.forbid_special = true;
  p.forbid_whitespace = true;
  p.forbid_disallowed_chars = true;
  return p;
}

bool MaskPolicy::trivial() const {
  return !forbid_special && !forbid_whitespace && !forbid_disallowed_chars && extra_forbidden.empty();
}

ForbidMask::ForbidMask(std::vector<bool> bits) : bits_(std::move(bits)) {}

std::size_t ForbidMask::num_allowed() const {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), false));
}

std::vector<TokenId> ForbidMask::allowed_ids() const {
  std::vector<TokenId> ids;
  for (std::size_t v = 0; v < bits_.size(); ++v) {
    if (!bits_[v]) ids.push_back(static_cast<TokenId>(v));
  }
  return ids;
}

std::uint64_t ForbidMask::fingerprint() const {
  Fnv1a h;
  for (bool b : bits_) h.update_value<char>(b ? 1 : 0);
  return h.digest();
}

namespace {

bool whitespace_only(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c) != 0; });
}

bool has_disallowed_char(const std::string& s, char lo, char hi) {
  return std::any_of(s.begin(), s.end(), [&](char c) {
    const auto u = static_cast<unsigned char>(c);
    return u < static_cast<unsigned char>(lo) || u > static_cast<unsigned char>(hi);
  });
}

}  // namespace

ForbidMask build_forbid_mask(const Vocabulary& vocab, std::span<const LabelSurfaceMap> surface_maps,
                             const MaskPolicy& policy) {
  std::vector<bool> bits(vocab.size(), false);
  for (const auto& map : surface_maps) {
    for (const auto& per_label : map.surface_ids) {
      for (const auto& ids : per_label) {
        for (TokenId id : ids) bits.at(static_cast<std::size_t>(id)) = true;
      }
    }
  }
  for (std::size_t v = 0; v < vocab.size(); ++v) {
    const auto id = static_cast<TokenId>(v);
    const auto& text = vocab.token(id);
    if (policy.forbid_special && vocab.is_control(id)) bits[v] = true;
    if (policy.forbid_whitespace && whitespace_only(text)) bits[v] = true;
    if (policy.forbid_disallowed_chars &&
        has_disallowed_char(text, policy.allowed_min, policy.allowed_max)) {
      bits[v] = true;
    }
  }
  for (const auto& s : policy.extra_forbidden) {
    for (TokenId id : vocab.tokenize(s)) bits.at(static_cast<std::size_t>(id)) = true;
  }
  if (std::find(bits.begin(), bits.end(), false) == bits.end()) throw AllForbidden();
  return ForbidMask(std::move(bits));
}

std::vector<std::size_t> label_token_positions(std::span<const TokenId> prefix_ids,
                                               std::span<const TokenId> surface_ids) {
  std::vector<std::size_t> positions(surface_ids.size());
  for (std::size_t i = 0; i < surface_ids.size(); ++i) positions[i] = prefix_ids.size() + i;
  return positions;
}

TokenIds tokenize_surface(const Vocabulary& vocab, std::string_view surface) {
  if (surface.empty()) throw ConfigError("label surface must not be empty");
  return vocab.tokenize(surface);
}

Vocabulary toy_vocabulary() {
  std::vector<std::string> tokens = {
      "<bos>", "<eos>", "<pad>", "<|im_start|>", "<|im_end|>",
      "\n", " ", ":", ".", "?", ",",
      "The", " answer", " is", "Review", "Passage", "Question",
      "user", "assistant", "###", " Instruction", " Response",
      " yes", " no", " Yes", " No",
      " the", " a", " movie", " film", " plot", " story", " acting", " music",
      " was", " very", " really", " quite", " and", " it", " this",
      " good", " great", " fun", " superb", " lovely",
      " bad", " awful", " dull", " boring", " poor",
      " about", " food", " pizza", " soup", " bread", " car", " train", " bike",
      " we", " had", " rode",
      "\xC3\xA9",          // é
      "\xE2\x86\x92",      // →
  };
  return Vocabulary(std::move(tokens), {.bos = 0, .eos = 1, .pad = 2}, {3, 4});
}

Vocabulary tiny_vocabulary() {
  std::vector<std::string> tokens = {"<bos>", ":",    " yes", " no", " a", " b",
                                     " c",    " d",   " e",   " f",  " g", " h"};
  return Vocabulary(std::move(tokens), {.bos = 0, .eos = std::nullopt, .pad = std::nullopt});
}

}  // namespace calsuffix
