#pragma once

// Closed-set identification metrics: similarity, gallery ranking, rank-1
// accuracy and mean average precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "psyreid/core.hpp"
#include "psyreid/dataset.hpp"
#include "psyreid/embed.hpp"

namespace psyreid {

enum class Similarity { cosine, euclidean };

inline std::string_view to_string(Similarity s) { return s == Similarity::cosine ? "cosine" : "euclidean"; }

inline Similarity parse_similarity(std::string_view s) {
  if (s == "cosine") return Similarity::cosine;
  if (s == "euclidean") return Similarity::euclidean;
  throw ParameterError("unknown similarity '" + std::string(s) + "'");
}

/// Larger is always more similar: cosine similarity, or the negated L2 distance.
/// Inputs are 32-bit; accumulation is 64-bit.
inline double similarity(std::span<const float> a, std::span<const float> b, Similarity kind) {
  if (a.size() != b.size())
    throw ParameterError("similarity: dim mismatch " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  if (kind == Similarity::cosine) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      dot += static_cast<double>(a[i]) * b[i];
      na += static_cast<double>(a[i]) * a[i];
      nb += static_cast<double>(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw ParameterError("cosine similarity of a zero vector");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
  }
  double ss = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    ss += d * d;
  }
  return -std::sqrt(ss);
}

struct EvalConfig {
  Similarity similarity = Similarity::cosine;
  bool cross_camera_filter = false;
  std::set<std::int64_t> junk_ids;
  std::size_t top_k = 1;  // extra CMC rank reported alongside rank-1
};

/// Gallery records paired with their embeddings, aligned by index.
class GalleryView {
 public:
  GalleryView(const Manifest& manifest, const EmbeddingMatrix& embeddings) : manifest_(&manifest), emb_(&embeddings) {
    rows_.reserve(manifest.size());
    for (const auto& r : manifest.records) {
      auto i = embeddings.find(r.image_id);
      if (!i) throw IntegrityError("gallery image '" + r.image_id + "' has no embedding");
      rows_.push_back(*i);
    }
  }

  std::size_t size() const noexcept { return rows_.size(); }
  const SampleRecord& record(std::size_t i) const { return manifest_->records[i]; }
  std::span<const float> vector(std::size_t i) const { return emb_->row(rows_[i]); }

 private:
  const Manifest* manifest_;
  const EmbeddingMatrix* emb_;
  std::vector<std::size_t> rows_;
};

struct RankingResult {
  std::string query_id;
  std::vector<std::size_t> order;  // gallery indices, best match first
  std::vector<bool> matches;       // aligned with order
  bool evaluable = false;
  std::string skip_reason;

  /// 1-based rank of the first true match, 0 when there is none.
  std::size_t first_match_rank() const {
    for (std::size_t i = 0; i < matches.size(); ++i)
      if (matches[i]) return i + 1;
    return 0;
  }
};

/// Ranks the retained gallery for one query. Junk identities are dropped; with
/// cross_camera_filter, same-identity same-camera entries are dropped. Ties are
/// broken by ascending gallery image_id.
inline RankingResult rank_gallery(const SampleRecord& query, std::span<const float> qvec, const GalleryView& gallery,
                                  const EvalConfig& cfg) {
  RankingResult res;
  res.query_id = query.image_id;
  std::vector<std::pair<double, std::size_t>> scored;
  scored.reserve(gallery.size());
  for (std::size_t i = 0; i < gallery.size(); ++i) {
    const auto& g = gallery.record(i);
    if (cfg.junk_ids.count(g.person_id)) continue;
    if (cfg.cross_camera_filter && g.person_id == query.person_id && g.camera_id == query.camera_id) continue;
    scored.emplace_back(similarity(qvec, gallery.vector(i), cfg.similarity), i);
  }
  if (scored.empty()) throw EvaluationError("query '" + query.image_id + "': retained gallery is empty");
  std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return gallery.record(a.second).image_id < gallery.record(b.second).image_id;
  });
  res.order.reserve(scored.size());
  res.matches.reserve(scored.size());
  for (const auto& [s, i] : scored) {
    res.order.push_back(i);
    res.matches.push_back(gallery.record(i).person_id == query.person_id);
  }
  res.evaluable = std::find(res.matches.begin(), res.matches.end(), true) != res.matches.end();
  if (!res.evaluable) res.skip_reason = "query identity absent from retained gallery";
  return res;
}

/// Non-interpolated AP: mean of precision@k over the ranks k holding a match.
inline double average_precision(const std::vector<bool>& flags) {
  std::size_t hits = 0;
  double sum = 0.0;
  for (std::size_t k = 0; k < flags.size(); ++k) {
    if (!flags[k]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  if (hits == 0) throw EvaluationError("average precision needs at least one relevant item");
  return sum / static_cast<double>(hits);
}

struct QueryResult {
  std::string query_id;
  std::size_t rank_of_first_match = 0;  // 0 when not evaluable
  double ap = 0.0;
  bool evaluable = false;
  std::string skip_reason;
};

struct EvalSummary {
  double rank1 = 0.0;
  double rank_k = 0.0;  // CMC at cfg.top_k
  double map = 0.0;
  std::size_t evaluable = 0;
  std::size_t total = 0;
  std::size_t rank1_hits = 0;
  std::vector<QueryResult> per_query;  // sorted by query image_id
  std::vector<std::string> warnings;
};

struct QuerySet {
  const Manifest& manifest;
  const EmbeddingMatrix& embeddings;
};

/// Ranks every query and aggregates rank-1, rank-k and mAP over evaluable
/// queries. Aggregation runs in query image_id order, so results do not depend
/// on the thread count.
inline EvalSummary evaluate(const QuerySet& queries, const GalleryView& gallery, const EvalConfig& cfg,
                            unsigned threads = 1) {
  std::vector<std::size_t> order(queries.manifest.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) {
    return queries.manifest.records[a].image_id < queries.manifest.records[b].image_id;
  });
  std::vector<QueryResult> results(order.size());
  parallel_for(order.size(), threads, [&](std::size_t slot) {
    const auto& q = queries.manifest.records[order[slot]];
    auto& out = results[slot];
    out.query_id = q.image_id;
    RankingResult rr;
    try {
      rr = rank_gallery(q, queries.embeddings.at(q.image_id), gallery, cfg);
    } catch (const EvaluationError&) {
      out.skip_reason = "retained gallery is empty";
      return;
    }
    out.evaluable = rr.evaluable;
    out.skip_reason = rr.skip_reason;
    if (rr.evaluable) {
      out.rank_of_first_match = rr.first_match_rank();
      out.ap = average_precision(rr.matches);
    }
  });

  EvalSummary s;
  s.total = results.size();
  std::size_t topk_hits = 0;
  double ap_sum = 0.0;
  for (const auto& r : results) {
    if (!r.evaluable) {
      s.warnings.push_back("query '" + r.query_id + "' skipped: " + r.skip_reason);
      continue;
    }
    ++s.evaluable;
    s.rank1_hits += r.rank_of_first_match == 1;
    topk_hits += r.rank_of_first_match <= cfg.top_k;
    ap_sum += r.ap;
  }
  s.per_query = std::move(results);
  if (s.evaluable == 0) throw EvaluationError("no evaluable queries");
  const auto n = static_cast<double>(s.evaluable);
  s.rank1 = static_cast<double>(s.rank1_hits) / n;
  s.rank_k = static_cast<double>(topk_hits) / n;
  s.map = ap_sum / n;
  return s;
}

inline double rank1_accuracy(const QuerySet& q, const GalleryView& g, const EvalConfig& cfg) { return evaluate(q, g, cfg).rank1; }

inline double mean_average_precision(const QuerySet& q, const GalleryView& g, const EvalConfig& cfg) {
  return evaluate(q, g, cfg).map;
}

inline void write_per_query_csv(std::ostream& out, const EvalSummary& s) {
  out << "query_id,rank_of_first_match,ap,evaluable\n";
  CsvWriter w(out);
  for (const auto& r : s.per_query) w.row(r.query_id, r.rank_of_first_match, r.ap, r.evaluable);
}

}  // namespace psyreid
