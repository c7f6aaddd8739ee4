// Independent reference computations used by the unit and acceptance tests.
// Nothing here touches the autodiff graph.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "relweave/knowledge_base.hpp"
#include "relweave/supervision.hpp"
#include "relweave/text.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(std::span<const double> flat, std::size_t rows, std::size_t cols) {
  Matrix m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = flat[r * cols + c];
  return m;
}

inline double safe_log(double x) { return std::log(std::max(x, 1e-12)); }

inline double answer_loss(const std::vector<double>& z, std::size_t gold) {
  double denom = 0.0;
  for (double v : z) denom += std::exp(v);
  return -std::log(std::exp(z[gold]) / denom);
}

// mean over pairs of BCE(y, sigmoid(h_i . W1 h_j))
inline double existence_loss(const Matrix& h, const Matrix& w1, const std::vector<std::tuple<int, int, int>>& pairs) {
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& [i, j, y] : pairs) {
    double s = 0.0;
    for (std::size_t a = 0; a < w1.size(); ++a)
      for (std::size_t b = 0; b < w1[a].size(); ++b) s += h[i][a] * w1[a][b] * h[j][b];
    const double p = 1.0 / (1.0 + std::exp(-s));
    total += -(y * safe_log(p) + (1 - y) * safe_log(1.0 - p));
  }
  return total / static_cast<double>(pairs.size());
}

// mean over typed pairs of -log softmax(W3 relu(W2 [h_i; h_j]))[k]
inline double type_loss(const Matrix& h, const Matrix& w2, const Matrix& w3,
                        const std::vector<std::tuple<int, int, int>>& pairs) {
  if (pairs.empty()) return 0.0;
  double total = 0.0;
  for (const auto& [i, j, k] : pairs) {
    std::vector<double> cat = h[i];
    cat.insert(cat.end(), h[j].begin(), h[j].end());
    std::vector<double> inner(w2.size());
    for (std::size_t r = 0; r < w2.size(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cat.size(); ++c) s += w2[r][c] * cat[c];
      inner[r] = std::max(0.0, s);
    }
    std::vector<double> logits(w3.size());
    double mx = -1e300;
    for (std::size_t r = 0; r < w3.size(); ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < inner.size(); ++c) s += w3[r][c] * inner[c];
      logits[r] = s;
      mx = std::max(mx, s);
    }
    double z = 0.0;
    for (double l : logits) z += std::exp(l - mx);
    total += -safe_log(std::exp(logits[k] - mx) / z);
  }
  return total / static_cast<double>(pairs.size());
}

inline double joint_loss(double ap, const std::vector<double>& re, const std::vector<double>& rt, double l1, double l2) {
  double aux = 0.0;
  for (std::size_t l = 0; l < re.size(); ++l) aux += l1 * re[l] + l2 * rt[l];
  return ap + aux / static_cast<double>(re.size());
}

// ---- matcher ---------------------------------------------------------------

struct Hit {
  std::string phrase;
  int side;
  std::size_t begin;
  std::size_t span;
  auto operator<=>(const Hit&) const = default;
};

inline std::vector<std::string> split_words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  std::string w;
  while (in >> w) out.push_back(w);
  return out;
}

// Enumerates every indexed n-gram, then keeps non-overlapping ones by
// earliest start and, at equal start, greatest length; first occurrence of a
// phrase wins. Positions come from the character alignment, not from the
// packer's word list.
inline std::vector<Hit> brute_force_mentions(const relweave::text::PackedSequence& packed,
                                             const relweave::kb::TripleIndex& index, std::size_t max_ngram) {
  std::vector<Hit> out;
  auto side = [&](const std::string& text, const std::vector<int>& c2t, int side_id) {
    // word boundaries in the normalized text
    std::vector<std::pair<std::size_t, std::size_t>> bounds;
    std::size_t i = 0;
    while (i < text.size()) {
      if (text[i] == ' ') {
        ++i;
        continue;
      }
      std::size_t j = i;
      while (j < text.size() && text[j] != ' ') ++j;
      bounds.push_back({i, j});
      i = j;
    }
    // only words whose characters all survived truncation
    std::vector<bool> alive(bounds.size());
    for (std::size_t w = 0; w < bounds.size(); ++w) {
      alive[w] = true;
      for (std::size_t c = bounds[w].first; c < bounds[w].second; ++c)
        if (c2t[c] < 0) alive[w] = false;
    }
    struct Cand {
      std::size_t start, len;
    };
    std::vector<Cand> cands;
    for (std::size_t s = 0; s < bounds.size(); ++s) {
      std::string phrase;
      for (std::size_t n = 1; n <= max_ngram && s + n <= bounds.size(); ++n) {
        if (!alive[s + n - 1]) break;
        if (!alive[s]) break;
        const auto& [b, e] = bounds[s + n - 1];
        phrase += (n > 1 ? " " : "") + text.substr(b, e - b);
        if (index.has_phrase(phrase)) cands.push_back({s, n});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      return a.start != b.start ? a.start < b.start : a.len > b.len;
    });
    std::size_t covered_until = 0;
    std::set<std::string> seen;
    for (const auto& c : cands) {
      if (c.start < covered_until) continue;
      covered_until = c.start + c.len;
      const std::size_t cb = bounds[c.start].first, ce = bounds[c.start + c.len - 1].second;
      std::set<int> toks;
      for (std::size_t k = cb; k < ce; ++k)
        if (text[k] != ' ') toks.insert(c2t[k]);
      const std::string phrase = text.substr(cb, ce - cb);
      if (seen.insert(phrase).second)
        out.push_back({phrase, side_id, static_cast<std::size_t>(*toks.begin()), toks.size()});
    }
  };
  side(packed.text_a, packed.char_to_token_a, 0);
  side(packed.text_b, packed.char_to_token_b, 1);
  return out;
}

// ---- overlap baseline --------------------------------------------------------

// Option with the most distinct words shared with document and question;
// ties go to the lowest index.
inline std::size_t overlap_choice(const relweave::text::Example& ex) {
  std::set<std::string> doc;
  for (const auto& w : split_words(relweave::text::normalize_text(relweave::text::side_a_text(ex)))) doc.insert(w);
  std::size_t best = 0, best_score = 0;
  for (std::size_t o = 0; o < ex.options.size(); ++o) {
    std::set<std::string> words;
    for (const auto& w : split_words(relweave::text::normalize_text(ex.options[o]))) words.insert(w);
    std::size_t score = 0;
    for (const auto& w : words) score += doc.contains(w) ? 1 : 0;
    if (score > best_score) {
      best = o;
      best_score = score;
    }
  }
  return best;
}

}  // namespace oracle
