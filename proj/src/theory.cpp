#include "polarquant/theory.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <map>
#include <stdexcept>
#include <string>

#include "polarquant/distribution.hpp"
#include "polarquant/parallel.hpp"
#include "polarquant/polar.hpp"
#include "polarquant/precondition.hpp"
#include "polarquant/random.hpp"
#include "polarquant/stats.hpp"

namespace polarquant {
namespace {

using nlohmann::json;

std::size_t samples_for(std::size_t k) {
  return std::clamp<std::size_t>(32 * k, 20000, 200000);
}

}  // namespace

std::vector<std::size_t> theorem1_sizes(std::size_t d, std::size_t base_size, double scale,
                                        std::size_t max_codebook_size) {
  if (!is_power_of_two(d) || d < 2) {
    throw std::invalid_argument("theorem1_sizes: d must be a power of two >= 2");
  }
  if (base_size < 2) throw std::invalid_argument("theorem1_sizes: base size must be >= 2");
  const std::size_t levels = log2_floor(d);
  std::vector<std::size_t> sizes(levels);
  for (std::size_t l = 1; l <= levels; ++l) {
    const double factor = l == 1 ? 4.0 : static_cast<double>(l);
    const auto k = static_cast<std::size_t>(
        std::llround(scale * static_cast<double>(base_size) * factor));
    sizes[l - 1] = std::clamp<std::size_t>(k, 1, max_codebook_size);
  }
  return sizes;
}

CodebookSet build_sized_codebooks(const std::vector<std::size_t>& sizes, std::uint64_t seed) {
  CodebookSet cs;
  cs.meta = {"offline", seed, 0};
  for (std::size_t l = 1; l <= sizes.size(); ++l) {
    const std::size_t n = samples_for(sizes[l - 1]);
    cs.meta.samples = std::max<std::uint64_t>(cs.meta.samples, n);
    const auto samples = sample_angles(l, n, derive_seed(seed, 2 * l));
    cs.levels.push_back(
        kmeans_1d(samples, sizes[l - 1], derive_seed(seed, 2 * l + 1), 100, l).codebook);
  }
  return cs;
}

TheoremTrialReport theorem1_trial(std::size_t d, const CodebookSet& codebooks, std::size_t trials,
                                  std::uint64_t seed, bool identity_rotation) {
  if (!is_power_of_two(d) || d < 2) {
    throw std::invalid_argument("theorem1_trial: d must be a power of two >= 2");
  }
  if (trials == 0) throw std::invalid_argument("theorem1_trial: trials must be positive");
  const std::size_t levels = log2_floor(d);
  codebooks.validate();
  if (codebooks.num_levels() != levels) {
    throw std::invalid_argument("theorem1_trial: need one codebook per level");
  }
  const RotationMatrix rotation = identity_rotation
                                      ? RotationMatrix::identity(d)
                                      : build_rotation(d, derive_seed(seed, 0xA0));
  std::vector<double> errors(trials);
  parallel_for(trials, [&](std::size_t begin, std::size_t end) {
    std::vector<double> x(d);
    std::vector<double> y(d);
    std::vector<double> restored(d);
    for (std::size_t t = begin; t < end; ++t) {
      Rng rng(derive_seed(seed, 0x100000 + t));
      for (auto& v : x) v = rng.normal();
      rotation.rotate(x, y);
      PolarRep rep = to_polar(std::span<const double>(y), levels);
      for (std::size_t l = 1; l <= levels; ++l) {
        const auto& cb = codebooks.level(l);
        for (auto& a : rep.angles[l - 1]) a = cb.centroid(cb.nearest(a));
      }
      const auto rotated_back = from_polar(rep);
      rotation.unrotate(rotated_back, restored);
      double num = 0.0;
      double den = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        num += (x[i] - restored[i]) * (x[i] - restored[i]);
        den += x[i] * x[i];
      }
      errors[t] = num / den;
    }
  });
  TheoremTrialReport report;
  report.d = d;
  report.trials = trials;
  for (const auto& cb : codebooks.levels) report.codebook_sizes.push_back(cb.size());
  CompensatedSum sum;
  for (double e : errors) sum.add(e);
  report.mean_rel_sq_error = sum.value() / static_cast<double>(trials);
  double bits = 0.0;
  for (std::size_t l = 1; l <= levels; ++l) {
    bits += static_cast<double>(d >> l) * std::log2(static_cast<double>(codebooks.level(l).size()));
  }
  report.bits_per_coord = bits / static_cast<double>(d);
  return report;
}

std::vector<TheoremTrialReport> check_theorem1(const Theorem1Options& options) {
  std::vector<TheoremTrialReport> out;
  for (double scale : options.scales) {
    const auto sizes =
        theorem1_sizes(options.d, options.base_size, scale, options.max_codebook_size);
    const CodebookSet books = build_sized_codebooks(sizes, derive_seed(options.seed, 1));
    TheoremTrialReport r = theorem1_trial(options.d, books, options.trials,
                                          derive_seed(options.seed, 2), options.identity_rotation);
    r.scale = scale;
    out.push_back(std::move(r));
  }
  return out;
}

VarianceBoundReport check_variance_bound(const std::vector<std::size_t>& levels,
                                         std::size_t samples, std::uint64_t seed) {
  if (samples < 2) throw std::invalid_argument("check_variance_bound: need >= 2 samples");
  VarianceBoundReport report;
  report.samples = samples;
  double lo = INFINITY;
  double hi = 0.0;
  for (std::size_t level : levels) {
    if (level < 2 || level > 10) {
      throw std::invalid_argument("check_variance_bound: level " + std::to_string(level) +
                                  " outside 2..10");
    }
    const auto draws = sample_angles(level, samples, derive_seed(seed, level));
    VarianceLevelReport r;
    r.level = level;
    r.empirical_var = variance(draws);
    r.quadrature_var = angle_mean_var(level).second;
    r.scaled_product = r.empirical_var * static_cast<double>(angle_half_dim(level) - 1);
    lo = std::min(lo, r.scaled_product);
    hi = std::max(hi, r.scaled_product);
    report.levels.push_back(r);
  }
  report.max_over_min_product = report.levels.empty() ? 0.0 : hi / lo;
  return report;
}

double best_codebook_error(std::size_t level, const std::vector<double>& samples, std::size_t k,
                           std::uint64_t seed, std::size_t restarts) {
  double best = INFINITY;
  for (std::size_t r = 0; r < std::max<std::size_t>(restarts, 1); ++r) {
    const auto fit = kmeans_1d(samples, k, derive_seed(seed, r), 100, level);
    best = std::min(best, expected_quant_error(fit.codebook));
  }
  return best;
}

CodebookSizeReport check_codebook_size_lemma(std::size_t level,
                                             const std::vector<double>& epsilons,
                                             std::uint64_t seed, std::size_t samples,
                                             std::size_t restarts) {
  if (level < 2) throw std::invalid_argument("check_codebook_size_lemma: level must be >= 2");
  const auto draws = sample_angles(level, samples, derive_seed(seed, 0));
  std::map<std::size_t, double> cache;
  const auto var_k = [&](std::size_t k) {
    auto it = cache.find(k);
    if (it != cache.end()) return it->second;
    const double v = best_codebook_error(level, draws, k, derive_seed(seed, 1 + k), restarts);
    cache.emplace(k, v);
    return v;
  };

  CodebookSizeReport report;
  report.level = level;
  // Var_1 is the variance itself: the single optimal centroid is the mean.
  report.var_1 = var_k(1);
  report.sigma = std::sqrt(report.var_1);
  const double log_inv_sigma = std::log(1.0 / report.sigma);
  for (double eps : epsilons) {
    if (!(eps > 0.0)) throw std::invalid_argument("check_codebook_size_lemma: eps must be > 0");
    const double target = eps * report.var_1;
    std::size_t hi = 1;
    while (var_k(hi) > target) {
      if (hi >= samples / 4) {
        throw std::runtime_error("check_codebook_size_lemma: target not reached");
      }
      hi *= 2;
    }
    std::size_t lo = hi / 2;  // var_k(lo) > target unless hi == 1
    if (hi == 1) lo = 0;
    while (hi - lo > 1) {
      const std::size_t mid = lo + (hi - lo) / 2;
      if (var_k(mid) <= target) {
        hi = mid;
      } else {
        lo = mid;
      }
    }
    CodebookSizeEntry e;
    e.epsilon = eps;
    e.min_k = hi;
    e.var_k = var_k(hi);
    e.scaled_ratio = static_cast<double>(hi) * std::sqrt(eps) / log_inv_sigma;
    report.entries.push_back(e);
  }
  report.evaluated.assign(cache.begin(), cache.end());
  return report;
}

SeparabilityReport check_separability(std::size_t d, std::size_t samples, std::uint64_t seed) {
  if (!is_power_of_two(d) || d < 4) {
    throw std::invalid_argument("check_separability: d must be a power of two >= 4");
  }
  if (samples < 16) throw std::invalid_argument("check_separability: too few samples");
  const std::size_t levels = log2_floor(d);
  const RotationMatrix rotation = build_rotation(d, derive_seed(seed, 0));
  // Columns: every angle (level-major), then the final radius.
  std::vector<std::size_t> column_level;
  for (std::size_t l = 1; l <= levels; ++l) {
    for (std::size_t j = 0; j < (d >> l); ++j) column_level.push_back(l);
  }
  const std::size_t angle_columns = column_level.size();
  std::vector<std::vector<double>> columns(angle_columns + 1, std::vector<double>(samples));
  Rng rng(derive_seed(seed, 1));
  std::vector<double> x(d);
  std::vector<double> y(d);
  for (std::size_t i = 0; i < samples; ++i) {
    for (auto& v : x) v = rng.normal();
    rotation.rotate(x, y);
    const PolarRep rep = to_polar(std::span<const double>(y), levels);
    std::size_t c = 0;
    for (const auto& level : rep.angles) {
      for (double a : level) columns[c++][i] = a;
    }
    columns[angle_columns][i] = rep.radii[0];
  }

  SeparabilityReport report;
  report.d = d;
  report.samples = samples;
  for (std::size_t a = 0; a < angle_columns; ++a) {
    for (std::size_t b = a + 1; b < angle_columns; ++b) {
      report.max_angle_corr = std::max(report.max_angle_corr,
                                       std::abs(pearson_correlation(columns[a], columns[b])));
    }
    report.max_radius_angle_corr =
        std::max(report.max_radius_angle_corr,
                 std::abs(pearson_correlation(columns[a], columns[angle_columns])));
  }
  std::vector<AngleCdfTable> tables;
  for (std::size_t l = 1; l <= levels; ++l) tables.emplace_back(l);
  for (std::size_t a = 0; a < angle_columns; ++a) {
    const auto& table = tables[column_level[a] - 1];
    report.max_ks = std::max(report.max_ks,
                             ks_statistic(columns[a], [&](double t) { return table(t); }));
  }
  report.ks_critical = ks_critical_value(0.01, samples);

  // Positive control: pair the two first level-1 angles by rank.
  std::vector<double> lead = columns[0];
  std::vector<double> follow = columns[1];
  std::vector<std::size_t> order(samples);
  for (std::size_t i = 0; i < samples; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto i, auto j) { return lead[i] < lead[j]; });
  std::sort(follow.begin(), follow.end());
  std::vector<double> repaired(samples);
  for (std::size_t r = 0; r < samples; ++r) repaired[order[r]] = follow[r];
  report.control_corr = std::abs(pearson_correlation(lead, repaired));
  return report;
}

std::string to_json(const std::vector<TheoremTrialReport>& reports) {
  json arr = json::array();
  for (const auto& r : reports) {
    arr.push_back({{"d", r.d},
                   {"scale", r.scale},
                   {"codebook_sizes", r.codebook_sizes},
                   {"trials", r.trials},
                   {"mean_rel_sq_error", r.mean_rel_sq_error},
                   {"bits_per_coord", r.bits_per_coord}});
  }
  return arr.dump(2);
}

std::string to_json(const VarianceBoundReport& report) {
  json levels = json::array();
  for (const auto& l : report.levels) {
    levels.push_back({{"level", l.level},
                      {"empirical_var", l.empirical_var},
                      {"quadrature_var", l.quadrature_var},
                      {"scaled_product", l.scaled_product}});
  }
  return json{{"samples", report.samples},
              {"levels", levels},
              {"max_over_min_product", report.max_over_min_product}}
      .dump(2);
}

std::string to_json(const CodebookSizeReport& report) {
  json entries = json::array();
  for (const auto& e : report.entries) {
    entries.push_back({{"epsilon", e.epsilon},
                       {"min_k", e.min_k},
                       {"var_k", e.var_k},
                       {"scaled_ratio", e.scaled_ratio}});
  }
  json evaluated = json::array();
  for (const auto& [k, v] : report.evaluated) evaluated.push_back({{"k", k}, {"var_k", v}});
  return json{{"level", report.level},
              {"var_1", report.var_1},
              {"sigma", report.sigma},
              {"entries", entries},
              {"evaluated", evaluated}}
      .dump(2);
}

std::string to_json(const SeparabilityReport& report) {
  return json{{"d", report.d},
              {"samples", report.samples},
              {"max_angle_corr", report.max_angle_corr},
              {"max_radius_angle_corr", report.max_radius_angle_corr},
              {"max_ks", report.max_ks},
              {"ks_critical", report.ks_critical},
              {"control_corr", report.control_corr}}
      .dump(2);
}

}  // namespace polarquant
