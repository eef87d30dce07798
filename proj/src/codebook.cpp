#include "polarquant/codebook.hpp"

#include <algorithm>
#include <bit>
#include <cassert>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>
#include <stdexcept>

#include "polarquant/distribution.hpp"
#include "polarquant/error.hpp"
#include "polarquant/random.hpp"
#include "polarquant/stats.hpp"

namespace polarquant {
namespace {

using nlohmann::json;

// Fenwick tree over nonnegative weights; supports point updates and
// weighted sampling by prefix-sum descent.
class WeightTree {
 public:
  explicit WeightTree(std::span<const double> weights) : tree_(weights.size() + 1, 0.0) {
    for (std::size_t i = 0; i < weights.size(); ++i) add(i, weights[i]);
  }

  void add(std::size_t i, double delta) {
    for (std::size_t j = i + 1; j < tree_.size(); j += j & (~j + 1)) tree_[j] += delta;
  }

  double total() const {
    double s = 0.0;
    for (std::size_t j = tree_.size() - 1; j > 0; j -= j & (~j + 1)) s += tree_[j];
    return s;
  }

  // Smallest index whose inclusive prefix sum exceeds target.
  std::size_t find(double target) const {
    std::size_t pos = 0;
    std::size_t step = std::bit_floor(tree_.size() - 1);
    for (; step > 0; step >>= 1) {
      const std::size_t next = pos + step;
      if (next < tree_.size() && tree_[next] <= target) {
        pos = next;
        target -= tree_[next];
      }
    }
    return std::min(pos, tree_.size() - 2);
  }

 private:
  std::vector<double> tree_;
};

// k-means++ on sorted samples. Each new centroid only lowers D^2 inside its
// own Voronoi cell, so updates touch a contiguous range of the sorted data.
std::vector<double> seed_plus_plus(std::span<const double> sorted, std::size_t k, Rng& rng) {
  const std::size_t n = sorted.size();
  std::vector<double> d2(n, 0.0);
  std::set<double> chosen;
  const double first = sorted[rng.uniform_index(n)];
  chosen.insert(first);
  for (std::size_t i = 0; i < n; ++i) d2[i] = (sorted[i] - first) * (sorted[i] - first);
  WeightTree tree(d2);

  while (chosen.size() < k) {
    const double total = tree.total();
    std::size_t pick = n;
    if (total > 0.0) {
      pick = tree.find(rng.uniform() * total);
      if (d2[pick] <= 0.0) pick = n;
    }
    if (pick == n) {
      // Accumulated rounding in the tree; fall back to the farthest sample.
      pick = static_cast<std::size_t>(std::max_element(d2.begin(), d2.end()) - d2.begin());
      if (d2[pick] <= 0.0) break;
    }
    const double c = sorted[pick];
    auto [it, inserted] = chosen.insert(c);
    if (!inserted) continue;
    const double lo = it == chosen.begin() ? -INFINITY : 0.5 * (*std::prev(it) + c);
    const double hi = std::next(it) == chosen.end() ? INFINITY : 0.5 * (c + *std::next(it));
    auto begin = std::upper_bound(sorted.begin(), sorted.end(), lo) - sorted.begin();
    auto end = std::lower_bound(sorted.begin(), sorted.end(), hi) - sorted.begin();
    for (auto i = static_cast<std::size_t>(begin); i < static_cast<std::size_t>(end); ++i) {
      const double nd = (sorted[i] - c) * (sorted[i] - c);
      if (nd < d2[i]) {
        tree.add(i, nd - d2[i]);
        d2[i] = nd;
      }
    }
  }
  return {chosen.begin(), chosen.end()};
}

std::vector<double> midpoints(std::span<const double> centroids) {
  std::vector<double> b;
  b.reserve(centroids.empty() ? 0 : centroids.size() - 1);
  for (std::size_t i = 0; i + 1 < centroids.size(); ++i) {
    b.push_back(0.5 * (centroids[i] + centroids[i + 1]));
  }
  return b;
}

std::uint32_t bits_for_size(std::size_t k) {
  return k <= 1 ? 0 : static_cast<std::uint32_t>(std::bit_width(k - 1));
}

}  // namespace

std::uint32_t BitWidthConfig::max_bits() const {
  return per_level_bits.empty() ? 0
                                : *std::max_element(per_level_bits.begin(), per_level_bits.end());
}

BitWidthConfig BitWidthConfig::standard() { return {{4, 2, 2, 2}, 16}; }

BitWidthConfig BitWidthConfig::uniform(std::size_t levels, std::uint32_t bits,
                                       std::uint32_t radius_bits) {
  return {std::vector<std::uint32_t>(levels, bits), radius_bits};
}

void BitWidthConfig::validate() const {
  if (per_level_bits.empty()) throw std::invalid_argument("BitWidthConfig: no levels");
  for (auto b : per_level_bits) {
    if (b < 1 || b > 24) {
      throw std::invalid_argument("BitWidthConfig: bit width " + std::to_string(b) +
                                  " outside [1, 24]");
    }
  }
  if (radius_bits != 16 && radius_bits != 32) {
    throw std::invalid_argument("BitWidthConfig: radius bits must be 16 or 32");
  }
}

LevelCodebook LevelCodebook::from_centroids(std::size_t level, std::vector<double> centroids) {
  if (level == 0) throw std::invalid_argument("LevelCodebook: level must be >= 1");
  if (centroids.empty()) throw std::invalid_argument("LevelCodebook: no centroids");
  const double end = angle_support_end(level);
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    const double c = centroids[i];
    if (!std::isfinite(c) || c < 0.0 || c > end || (level == 1 && c >= end)) {
      throw std::invalid_argument("LevelCodebook: centroid outside level " +
                                  std::to_string(level) + " support");
    }
    if (i > 0 && !(centroids[i - 1] < c)) {
      throw std::invalid_argument("LevelCodebook: centroids not strictly increasing");
    }
  }
  LevelCodebook cb;
  cb.level_ = level;
  cb.boundaries_ = midpoints(centroids);
  cb.centroids_ = std::move(centroids);
  return cb;
}

std::uint32_t LevelCodebook::nearest(double value) const {
  // Boundary search assigns an exact midpoint to the left interval; the
  // neighbour check makes the result agree with a linear scan even when the
  // rounded midpoint is off by an ulp.
  auto idx = static_cast<std::size_t>(
      std::lower_bound(boundaries_.begin(), boundaries_.end(), value) - boundaries_.begin());
  const auto dist = [&](std::size_t i) { return std::abs(centroids_[i] - value); };
  if (idx > 0 && dist(idx - 1) <= dist(idx)) --idx;
  else if (idx + 1 < centroids_.size() && dist(idx + 1) < dist(idx)) ++idx;
  return static_cast<std::uint32_t>(idx);
}

std::uint32_t nearest_linear_scan(std::span<const double> centroids, double value) {
  std::size_t best = 0;
  double best_dist = std::abs(centroids[0] - value);
  for (std::size_t i = 1; i < centroids.size(); ++i) {
    const double d = std::abs(centroids[i] - value);
    if (d < best_dist) {
      best = i;
      best_dist = d;
    }
  }
  return static_cast<std::uint32_t>(best);
}

void CodebookSet::validate() const {
  if (levels.empty()) throw std::invalid_argument("CodebookSet: no levels");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (levels[i].level() != i + 1) {
      throw std::invalid_argument("CodebookSet: entry " + std::to_string(i) + " has level " +
                                  std::to_string(levels[i].level()));
    }
  }
}

void CodebookSet::check_compatible(const BitWidthConfig& config) const {
  validate();
  if (levels.size() != config.levels()) {
    throw std::invalid_argument("CodebookSet: " + std::to_string(levels.size()) +
                                " levels, config expects " + std::to_string(config.levels()));
  }
  for (std::size_t l = 1; l <= levels.size(); ++l) {
    if (level(l).size() > (std::size_t{1} << config.bits(l))) {
      throw std::invalid_argument("CodebookSet: level " + std::to_string(l) + " has " +
                                  std::to_string(level(l).size()) + " centroids, more than 2^" +
                                  std::to_string(config.bits(l)));
    }
  }
}

std::uint64_t CodebookSet::hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto mix = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFFu;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& cb : levels) {
    mix(cb.level());
    mix(cb.size());
    for (double c : cb.centroids()) mix(std::bit_cast<std::uint64_t>(c));
  }
  return h;
}

KMeansResult kmeans_1d(std::span<const double> samples, std::size_t k, std::uint64_t seed,
                       std::size_t max_iters, std::size_t level) {
  if (k == 0) throw std::invalid_argument("kmeans_1d: k must be >= 1");
  if (samples.size() < k) {
    throw std::invalid_argument("kmeans_1d: " + std::to_string(samples.size()) +
                                " samples for k = " + std::to_string(k));
  }
  std::vector<double> sorted(samples.begin(), samples.end());
  for (double v : sorted) {
    if (std::isnan(v)) throw std::invalid_argument("kmeans_1d: NaN sample");
  }
  std::sort(sorted.begin(), sorted.end());
  {
    std::size_t count = 1;
    for (std::size_t i = 1; i < sorted.size() && count < k; ++i) {
      if (sorted[i] != sorted[i - 1]) ++count;
    }
    if (count < k) {
      throw std::invalid_argument("kmeans_1d: fewer than k distinct samples");
    }
  }

  const std::size_t n = sorted.size();
  Rng rng(seed);
  std::vector<double> centroids = seed_plus_plus(sorted, k, rng);

  KMeansResult result;
  std::vector<std::uint32_t> assignment(n);
  std::vector<std::uint32_t> previous;
  std::vector<double> sq(n);
  for (std::size_t it = 0; it < std::max<std::size_t>(max_iters, 1); ++it) {
    const LevelCodebook current = LevelCodebook::from_centroids(level, centroids);
    CompensatedSum cost;
    for (std::size_t i = 0; i < n; ++i) {
      assignment[i] = current.nearest(sorted[i]);
      const double diff = sorted[i] - centroids[assignment[i]];
      sq[i] = diff * diff;
      cost.add(sq[i]);
    }
    result.cost_history.push_back(cost.value() / static_cast<double>(n));
    ++result.iterations;
    assert(result.cost_history.size() < 2 ||
           result.cost_history.back() <=
               result.cost_history[result.cost_history.size() - 2] * (1.0 + 1e-12));
    if (assignment == previous) break;
    if (it + 1 == max_iters) break;
    previous = assignment;

    std::vector<CompensatedSum> sums(k);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums[assignment[i]].add(sorted[i]);
      ++counts[assignment[i]];
    }
    bool reseeded = false;
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] > 0) {
        centroids[j] = sums[j].value() / static_cast<double>(counts[j]);
        continue;
      }
      // Empty cluster: move it to the sample farthest from its centroid.
      const auto far = static_cast<std::size_t>(std::max_element(sq.begin(), sq.end()) - sq.begin());
      if (sq[far] <= 0.0) continue;
      centroids[j] = sorted[far];
      sq[far] = 0.0;
      reseeded = true;
    }
    if (reseeded) std::sort(centroids.begin(), centroids.end());
    // Means of disjoint sorted ranges are strictly increasing; only a reseed
    // can land on an existing value.
    for (std::size_t j = 1; j < k; ++j) {
      if (!(centroids[j - 1] < centroids[j])) {
        centroids[j] = std::nextafter(centroids[j - 1], INFINITY);
      }
    }
  }
  result.codebook = LevelCodebook::from_centroids(level, centroids);
  return result;
}

CodebookSet build_online(const std::vector<std::vector<double>>& angles_per_level,
                         const BitWidthConfig& config, std::uint64_t seed) {
  config.validate();
  if (angles_per_level.size() != config.levels()) {
    throw std::invalid_argument("build_online: got angles for " +
                                std::to_string(angles_per_level.size()) + " levels, config has " +
                                std::to_string(config.levels()));
  }
  CodebookSet cs;
  cs.meta = {"online", seed, 0};
  for (std::size_t l = 1; l <= config.levels(); ++l) {
    const auto& samples = angles_per_level[l - 1];
    if (samples.empty()) {
      throw std::invalid_argument("build_online: no samples for level " + std::to_string(l));
    }
    cs.meta.samples = std::max<std::uint64_t>(cs.meta.samples, samples.size());
    const std::size_t k = std::size_t{1} << config.bits(l);
    cs.levels.push_back(kmeans_1d(samples, k, derive_seed(seed, l), 100, l).codebook);
  }
  return cs;
}

CodebookSet build_offline(const BitWidthConfig& config, std::size_t samples_per_level,
                          std::uint64_t seed) {
  config.validate();
  if (samples_per_level < (std::size_t{1} << config.max_bits())) {
    throw std::invalid_argument("build_offline: samples_per_level below largest codebook size");
  }
  CodebookSet cs;
  cs.meta = {"offline", seed, samples_per_level};
  for (std::size_t l = 1; l <= config.levels(); ++l) {
    const auto samples = sample_angles(l, samples_per_level, derive_seed(seed, 2 * l));
    const std::size_t k = std::size_t{1} << config.bits(l);
    cs.levels.push_back(kmeans_1d(samples, k, derive_seed(seed, 2 * l + 1), 100, l).codebook);
  }
  return cs;
}

double expected_quant_error(const LevelCodebook& cb) {
  const std::size_t level = cb.level();
  const double end = angle_support_end(level);
  const auto centroids = cb.centroids();
  const auto boundaries = cb.boundaries();
  const std::size_t panels = std::max<std::size_t>(16, 2 * ((20000 / centroids.size()) / 2 + 1));
  CompensatedSum total;
  for (std::size_t i = 0; i < centroids.size(); ++i) {
    const double lo = i == 0 ? 0.0 : boundaries[i - 1];
    const double hi = i + 1 == centroids.size() ? end : boundaries[i];
    if (!(hi > lo)) continue;
    const double c = centroids[i];
    total.add(simpson([&](double t) { return (t - c) * (t - c) * angle_pdf(level, t); }, lo, hi,
                      panels));
  }
  return total.value();
}

std::string codebooks_to_json(const CodebookSet& cs) {
  cs.validate();
  json j;
  j["levels"] = json::array();
  for (const auto& cb : cs.levels) {
    j["levels"].push_back({{"level", cb.level()},
                           {"bits", bits_for_size(cb.size())},
                           {"centroids", std::vector<double>(cb.centroids().begin(),
                                                             cb.centroids().end())}});
  }
  j["meta"] = {{"mode", cs.meta.mode},
               {"seed", cs.meta.seed},
               {"samples", cs.meta.samples},
               {"L", cs.levels.size()}};
  // nlohmann emits the shortest decimal that round-trips each double.
  return j.dump(2);
}

CodebookSet codebooks_from_json(const std::string& text) {
  CodebookSet cs;
  try {
    const json j = json::parse(text);
    const auto& meta = j.at("meta");
    cs.meta.mode = meta.value("mode", std::string("custom"));
    cs.meta.seed = meta.at("seed").get<std::uint64_t>();
    cs.meta.samples = meta.at("samples").get<std::uint64_t>();
    const auto declared = meta.at("L").get<std::size_t>();
    const auto& levels = j.at("levels");
    if (!levels.is_array() || levels.size() != declared) {
      throw FormatError("codebook file: expected " + std::to_string(declared) + " levels");
    }
    for (std::size_t i = 0; i < levels.size(); ++i) {
      const auto& entry = levels[i];
      const auto level = entry.at("level").get<std::size_t>();
      if (level != i + 1) {
        throw FormatError("codebook file: level " + std::to_string(i + 1) + " missing");
      }
      const auto bits = entry.at("bits").get<std::uint32_t>();
      auto centroids = entry.at("centroids").get<std::vector<double>>();
      if (bits > 24 || centroids.size() > (std::size_t{1} << bits)) {
        throw FormatError("codebook file: level " + std::to_string(level) +
                          " has more centroids than 2^bits");
      }
      try {
        cs.levels.push_back(LevelCodebook::from_centroids(level, std::move(centroids)));
      } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("codebook file: ") + e.what());
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("codebook file: ") + e.what());
  }
  return cs;
}

void save_codebooks(const CodebookSet& cs, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << codebooks_to_json(cs) << '\n';
}

CodebookSet load_codebooks(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string() + " for reading");
  std::stringstream buffer;
  buffer << in.rdbuf();
  return codebooks_from_json(buffer.str());
}

}  // namespace polarquant
