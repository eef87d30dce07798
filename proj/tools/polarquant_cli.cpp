#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "polarquant/codebook.hpp"
#include "polarquant/distribution.hpp"
#include "polarquant/error.hpp"
#include "polarquant/kvcache.hpp"
#include "polarquant/parallel.hpp"
#include "polarquant/polar.hpp"
#include "polarquant/precondition.hpp"
#include "polarquant/quantizer.hpp"
#include "polarquant/random.hpp"
#include "polarquant/stats.hpp"
#include "polarquant/tensor_io.hpp"
#include "polarquant/theory.hpp"

namespace pq = polarquant;
using nlohmann::json;

namespace {

constexpr int kCsvSchemaVersion = 1;

struct Globals {
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  std::string format = "json";
  std::string out;
};

// Flags shared by every subcommand that needs a quantizer configuration.
struct ConfigFlags {
  std::size_t levels = 4;
  std::vector<std::uint32_t> bits;
  std::string radius_precision = "f16";
  std::string codebook_mode = "online";
  std::optional<std::uint64_t> rotation_seed;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--levels", levels, "Polar recursion depth L")->check(CLI::Range(1, 24));
    cmd->add_option("--bits", bits, "Per-level bit widths, comma separated")->delimiter(',');
    cmd->add_option("--radius-precision", radius_precision, "Stored radius precision")
        ->check(CLI::IsMember({"f16", "f32"}));
    cmd->add_option("--codebook-mode", codebook_mode, "Codebook construction")
        ->check(CLI::IsMember({"online", "offline"}));
    cmd->add_option("--rotation-seed", rotation_seed, "Preconditioner seed (default: --seed)");
  }

  pq::QuantizerConfig build(std::uint64_t seed) const {
    pq::QuantizerConfig c;
    c.radius_precision =
        radius_precision == "f32" ? pq::RadiusPrecision::kF32 : pq::RadiusPrecision::kF16;
    c.codebook_mode = codebook_mode == "offline" ? pq::CodebookMode::kOffline
                                                 : pq::CodebookMode::kOnline;
    c.rotation_seed = rotation_seed.value_or(seed);
    std::vector<std::uint32_t> widths = bits;
    if (widths.empty()) {
      widths.assign(levels, 2);
      widths[0] = 4;
    } else if (widths.size() == 1) {
      widths.assign(levels, widths[0]);
    } else if (widths.size() != levels) {
      throw CLI::ValidationError("--bits", "expected " + std::to_string(levels) +
                                               " comma-separated widths, got " +
                                               std::to_string(widths.size()));
    }
    c.bits.per_level_bits = widths;
    c.bits.radius_bits = pq::radius_bits(c.radius_precision);
    try {
      c.validate();
    } catch (const std::invalid_argument& e) {
      throw CLI::ValidationError("--bits", e.what());
    }
    return c;
  }
};

json config_json(const pq::QuantizerConfig& c) {
  return {{"levels", c.bits.levels()},
          {"bits", c.bits.per_level_bits},
          {"radius_precision", c.radius_precision == pq::RadiusPrecision::kF32 ? "f32" : "f16"},
          {"codebook_mode", c.codebook_mode == pq::CodebookMode::kOffline ? "offline" : "online"},
          {"rotation_seed", c.rotation_seed},
          {"bits_per_coordinate", pq::bits_per_coordinate(c.bits).value()}};
}

json envelope(const Globals& g, const std::string& command, json config) {
  return {{"tool_version", POLARQUANT_VERSION},
          {"command", command},
          {"seed", g.seed},
          {"config", std::move(config)}};
}

void emit(const Globals& g, const std::string& text) {
  if (g.out.empty() || g.out == "-") {
    std::cout << text;
    return;
  }
  std::ofstream f(g.out, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + g.out + " for writing");
  f << text;
  if (!f) throw std::runtime_error("failed writing " + g.out);
}

std::string csv_header(const std::string& command, const std::string& columns) {
  return "# polarquant " + command + " csv v" + std::to_string(kCsvSchemaVersion) + " (tool " +
         POLARQUANT_VERSION + ")\n" + columns + "\n";
}

void require_out(const Globals& g, const char* command) {
  if (g.out.empty() || g.out == "-") {
    throw CLI::ValidationError("--out", std::string(command) + " writes a binary file; --out is required");
  }
}

pq::RotationMatrix make_rotation(std::size_t d, std::uint64_t seed) {
  return pq::build_rotation(d, seed);
}

std::vector<std::vector<double>> angles_by_level(const pq::EmbeddingMatrix& y, std::size_t levels) {
  std::vector<std::vector<double>> out(levels);
  for (const auto& rep : pq::to_polar_batch(y, levels)) {
    for (std::size_t l = 0; l < levels; ++l) {
      out[l].insert(out[l].end(), rep.angles[l].begin(), rep.angles[l].end());
    }
  }
  return out;
}

pq::CodebookSet build_codebooks(const pq::QuantizerConfig& config, const pq::EmbeddingMatrix* x,
                                std::size_t samples, std::uint64_t seed) {
  if (config.codebook_mode == pq::CodebookMode::kOffline) {
    return pq::build_offline(config.bits, samples, seed);
  }
  if (x == nullptr) throw CLI::ValidationError("--in", "online codebooks need --in");
  const auto y = pq::apply(*x, make_rotation(x->cols(), config.rotation_seed));
  return pq::build_online(angles_by_level(y, config.bits.levels()), config.bits, seed);
}

// ---- subcommands -----------------------------------------------------------

struct GenArgs {
  std::size_t n = 1024;
  std::size_t d = 128;
  std::string dtype = "f32";
  bool heavy_tailed = false;
  double nu = 3.0;
};

void run_gen(const Globals& g, const GenArgs& a) {
  require_out(g, "gen");
  const auto m = a.heavy_tailed ? pq::generate_heavy_tailed(a.n, a.d, g.seed, a.nu)
                                : pq::generate_gaussian(a.n, a.d, g.seed);
  pq::save_tensor(m, g.out, a.dtype == "f16" ? pq::DType::kF16 : pq::DType::kF32);
}

struct CodebookArgs {
  ConfigFlags config;
  std::string in;
  std::size_t samples = 100000;
};

void run_codebook(const Globals& g, const CodebookArgs& a) {
  require_out(g, "codebook");
  const auto config = a.config.build(g.seed);
  std::optional<pq::EmbeddingMatrix> x;
  if (!a.in.empty()) x = pq::load_tensor(a.in);
  const auto cs = build_codebooks(config, x ? &*x : nullptr, a.samples, g.seed);
  pq::save_codebooks(cs, g.out);
}

struct QuantizeArgs {
  ConfigFlags config;
  std::string in;
  std::string codebooks;
};

void run_quantize(const Globals& g, const QuantizeArgs& a) {
  require_out(g, "quantize");
  const auto config = a.config.build(g.seed);
  const auto x = pq::load_tensor(a.in);
  const auto cs = pq::load_codebooks(a.codebooks);
  const auto batch = pq::encode_batch(x, make_rotation(x.cols(), config.rotation_seed), cs, config);
  pq::save_quantized(batch, g.out);
}

struct DequantizeArgs {
  std::string in;
  std::string codebooks;
};

void run_dequantize(const Globals& g, const DequantizeArgs& a) {
  require_out(g, "dequantize");
  const auto batch = pq::load_quantized(a.in);
  const auto cs = pq::load_codebooks(a.codebooks);
  const auto x = pq::decode_batch(batch, make_rotation(batch.dim, batch.config.rotation_seed), cs);
  pq::save_tensor(x, g.out, pq::DType::kF32);
}

struct StatsArgs {
  std::string in;
  std::size_t levels = 4;
  std::size_t bins = 64;
  std::optional<std::uint64_t> rotation_seed;
};

void run_stats(const Globals& g, const StatsArgs& a) {
  const auto x = pq::load_tensor(a.in);
  pq::check_polar_shape(x.cols(), a.levels);
  const std::uint64_t rseed = a.rotation_seed.value_or(g.seed);
  const auto rotated = pq::apply(x, make_rotation(x.cols(), rseed));

  json variants = json::array();
  std::ostringstream csv;
  csv << csv_header("stats",
                    "variant,level,bin,bin_lo,bin_hi,count,empirical_density,analytic_pdf,ks,min,max");
  for (const auto* variant : {"unrotated", "rotated"}) {
    const auto& data = std::string(variant) == "rotated" ? rotated : x;
    const auto per_level = angles_by_level(data, a.levels);
    json levels = json::array();
    for (std::size_t l = 1; l <= a.levels; ++l) {
      const auto& s = per_level[l - 1];
      const double end = pq::angle_support_end(l);
      const auto hist = pq::make_histogram(s, 0.0, end, a.bins);
      const pq::AngleCdfTable cdf(l);
      const double ks = pq::ks_statistic(s, [&](double t) { return cdf(t); });
      const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
      std::vector<double> density;
      std::vector<double> pdf;
      for (std::size_t b = 0; b < a.bins; ++b) {
        const double left = hist.lo + hist.bin_width() * static_cast<double>(b);
        const double dens = static_cast<double>(hist.counts[b]) /
                            (static_cast<double>(s.size()) * hist.bin_width());
        const double p = pq::angle_pdf(l, left + 0.5 * hist.bin_width());
        density.push_back(dens);
        pdf.push_back(p);
        csv << variant << ',' << l << ',' << b << ',' << left << ',' << left + hist.bin_width()
            << ',' << hist.counts[b] << ',' << dens << ',' << p << ',' << ks << ',' << *lo << ','
            << *hi << '\n';
      }
      levels.push_back({{"level", l},
                        {"samples", s.size()},
                        {"ks", ks},
                        {"min", *lo},
                        {"max", *hi},
                        {"mean", pq::mean(s)},
                        {"counts", hist.counts},
                        {"empirical_density", density},
                        {"analytic_pdf", pdf}});
    }
    variants.push_back({{"variant", variant}, {"levels", levels}});
  }
  if (g.format == "csv") {
    emit(g, csv.str());
    return;
  }
  json out = envelope(g, "stats",
                      {{"in", a.in}, {"levels", a.levels}, {"bins", a.bins}, {"rotation_seed", rseed}});
  out["rows"] = x.rows();
  out["dim"] = x.cols();
  out["variants"] = variants;
  emit(g, out.dump(2) + "\n");
}

struct AttendArgs {
  ConfigFlags config;
  std::string keys;
  std::string values;
  std::string queries;
  std::size_t offline_samples = 100000;
};

void run_attend(const Globals& g, const AttendArgs& a) {
  pq::KVCacheOptions opts;
  opts.quantizer = a.config.build(g.seed);
  opts.offline_samples = a.offline_samples;
  const auto k = pq::load_tensor(a.keys);
  const auto v = pq::load_tensor(a.values);
  const auto q = pq::load_tensor(a.queries);
  const auto cache = pq::QuantizedKVCache::prefill(k, v, opts, g.seed);
  if (q.cols() != k.cols()) throw std::invalid_argument("queries and keys differ in width");

  std::ostringstream csv;
  csv << csv_header("attend", "query,tokens,rel_error,score_sum");
  json rows = json::array();
  pq::CompensatedSum total;
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const auto approx = cache.attend(q.row(i));
    const auto exact = pq::attend_exact(k, v, q.row(i));
    const double err = pq::relative_l2_error(approx.output, exact.output);
    pq::CompensatedSum ssum;
    for (double s : approx.scores) ssum.add(s);
    total.add(err);
    csv << i << ',' << approx.scores.size() << ',' << err << ',' << ssum.value() << '\n';
    rows.push_back({{"query", i}, {"rel_error", err}, {"score_sum", ssum.value()}});
  }
  if (g.format == "csv") {
    emit(g, csv.str());
    return;
  }
  json out = envelope(g, "attend", config_json(opts.quantizer));
  out["tokens"] = cache.token_count();
  out["mean_rel_error"] = q.rows() ? total.value() / static_cast<double>(q.rows()) : 0.0;
  out["memory"] = json::parse(cache.memory_report().to_json());
  out["queries"] = rows;
  emit(g, out.dump(2) + "\n");
}

struct ValidateArgs {
  std::string which;
  std::size_t d = 64;
  std::size_t trials = 2000;
  std::size_t base_size = 4;
  std::size_t samples = 100000;
  std::size_t level = 3;
  std::vector<std::size_t> levels = {2, 3, 4, 5, 6};
  std::vector<double> eps = {0.1, 0.03, 0.01};
};

void run_validate(const Globals& g, const ValidateArgs& a) {
  json report;
  std::ostringstream csv;
  if (a.which == "theorem1") {
    pq::Theorem1Options o;
    o.d = a.d;
    o.trials = a.trials;
    o.base_size = a.base_size;
    o.seed = g.seed;
    const auto r = pq::check_theorem1(o);
    report = json::parse(pq::to_json(r));
    csv << csv_header("validate-theorem1", "scale,bits_per_coord,mean_rel_sq_error");
    for (const auto& t : r) csv << t.scale << ',' << t.bits_per_coord << ',' << t.mean_rel_sq_error << '\n';
  } else if (a.which == "variance") {
    const auto r = pq::check_variance_bound(a.levels, a.samples, g.seed);
    report = json::parse(pq::to_json(r));
    csv << csv_header("validate-variance", "level,empirical_var,quadrature_var,scaled_product");
    for (const auto& l : r.levels) {
      csv << l.level << ',' << l.empirical_var << ',' << l.quadrature_var << ',' << l.scaled_product << '\n';
    }
  } else if (a.which == "codebook-lemma") {
    const auto r = pq::check_codebook_size_lemma(a.level, a.eps, g.seed, a.samples);
    report = json::parse(pq::to_json(r));
    csv << csv_header("validate-codebook-lemma", "epsilon,min_k,var_k,scaled_ratio");
    for (const auto& e : r.entries) {
      csv << e.epsilon << ',' << e.min_k << ',' << e.var_k << ',' << e.scaled_ratio << '\n';
    }
  } else {
    const auto r = pq::check_separability(a.d, a.samples, g.seed);
    report = json::parse(pq::to_json(r));
    csv << csv_header("validate-separability",
                      "max_angle_corr,max_radius_angle_corr,max_ks,ks_critical,control_corr");
    csv << r.max_angle_corr << ',' << r.max_radius_angle_corr << ',' << r.max_ks << ','
        << r.ks_critical << ',' << r.control_corr << '\n';
  }
  if (g.format == "csv") {
    emit(g, csv.str());
    return;
  }
  json out = envelope(g, "validate",
                      {{"which", a.which}, {"d", a.d}, {"trials", a.trials}, {"samples", a.samples}});
  out["report"] = report;
  emit(g, out.dump(2) + "\n");
}

struct BenchArgs {
  ConfigFlags config;
  std::size_t n = 4096;
  std::size_t d = 128;
  std::size_t queries = 32;
};

void run_bench(const Globals& g, const BenchArgs& a) {
  using clock = std::chrono::steady_clock;
  const auto seconds = [](clock::time_point t0) {
    return std::chrono::duration<double>(clock::now() - t0).count();
  };
  const auto config = a.config.build(g.seed);
  const auto x = pq::generate_gaussian(a.n, a.d, g.seed);
  const auto rotation = make_rotation(a.d, config.rotation_seed);

  auto t0 = clock::now();
  const auto cs = build_codebooks(config, &x, 100000, g.seed);
  const double t_codebook = seconds(t0);
  t0 = clock::now();
  const auto batch = pq::encode_batch(x, rotation, cs, config);
  const double t_encode = seconds(t0);
  t0 = clock::now();
  const auto decoded = pq::decode_batch(batch, rotation, cs);
  const double t_decode = seconds(t0);

  pq::KVCacheOptions opts;
  opts.quantizer = config;
  const auto cache = pq::QuantizedKVCache::prefill(x, x, opts, g.seed);
  const auto q = pq::generate_gaussian(a.queries, a.d, pq::derive_seed(g.seed, 1));
  t0 = clock::now();
  for (std::size_t i = 0; i < q.rows(); ++i) (void)cache.attend(q.row(i));
  const double t_attend = seconds(t0);

  const double rows = static_cast<double>(a.n);
  if (g.format == "csv") {
    std::ostringstream csv;
    csv << csv_header("bench", "stage,seconds,rows_per_second");
    csv << "codebook," << t_codebook << ",\n";
    csv << "encode," << t_encode << ',' << rows / t_encode << '\n';
    csv << "decode," << t_decode << ',' << rows / t_decode << '\n';
    csv << "attend," << t_attend << ',' << static_cast<double>(a.queries) / t_attend << '\n';
    emit(g, csv.str());
    return;
  }
  json out = envelope(g, "bench", config_json(config));
  out["n"] = a.n;
  out["d"] = a.d;
  out["threads"] = pq::thread_count();
  out["seconds"] = {{"codebook", t_codebook},
                    {"encode", t_encode},
                    {"decode", t_decode},
                    {"attend", t_attend}};
  out["encode_rows_per_second"] = rows / t_encode;
  out["decode_rows_per_second"] = rows / t_decode;
  out["attend_queries_per_second"] = static_cast<double>(a.queries) / t_attend;
  emit(g, out.dump(2) + "\n");
}

void print_error(const std::string& kind, const std::string& message, int code) {
  std::cerr << json{{"error", kind}, {"message", message}, {"exit_code", code}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"PolarQuant vector quantization toolkit", "polarquant"};
  app.set_version_flag("--version", POLARQUANT_VERSION);
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random choice (default 0)");
  app.add_option("--threads", g.threads, "Worker threads (0 = available cores)");
  app.add_option("--format", g.format, "Report format")->check(CLI::IsMember({"csv", "json"}));
  app.add_option("--out", g.out, "Output path (reports default to stdout)");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Write a synthetic tensor file");
  gen_cmd->add_option("--n", gen.n, "Rows")->required();
  gen_cmd->add_option("--d", gen.d, "Columns")->required();
  gen_cmd->add_option("--dtype", gen.dtype)->check(CLI::IsMember({"f32", "f16"}));
  gen_cmd->add_flag("--heavy-tailed", gen.heavy_tailed, "Student-t rows with outlier channels");
  gen_cmd->add_option("--nu", gen.nu, "Student-t degrees of freedom");

  CodebookArgs cb;
  auto* cb_cmd = app.add_subcommand("codebook", "Build and save per-level codebooks");
  cb.config.add_to(cb_cmd);
  cb_cmd->add_option("--in", cb.in, "Tensor file (online mode)");
  cb_cmd->add_option("--samples", cb.samples, "Draws per level (offline mode)");

  QuantizeArgs qa;
  auto* q_cmd = app.add_subcommand("quantize", "Encode a tensor file");
  qa.config.add_to(q_cmd);
  q_cmd->add_option("--in", qa.in)->required();
  q_cmd->add_option("--codebooks", qa.codebooks)->required();

  DequantizeArgs da;
  auto* dq_cmd = app.add_subcommand("dequantize", "Decode a quantized file to f32");
  dq_cmd->add_option("--in", da.in)->required();
  dq_cmd->add_option("--codebooks", da.codebooks)->required();

  StatsArgs sa;
  auto* st_cmd = app.add_subcommand("stats", "Per-level angle histograms against the analytic pdf");
  st_cmd->add_option("--in", sa.in)->required();
  st_cmd->add_option("--levels", sa.levels)->check(CLI::Range(1, 24));
  st_cmd->add_option("--bins", sa.bins)->check(CLI::Range(2, 100000));
  st_cmd->add_option("--rotation-seed", sa.rotation_seed);

  AttendArgs aa;
  auto* at_cmd = app.add_subcommand("attend", "Quantized vs exact attention error per query");
  aa.config.add_to(at_cmd);
  at_cmd->add_option("--keys", aa.keys)->required();
  at_cmd->add_option("--values", aa.values)->required();
  at_cmd->add_option("--queries", aa.queries)->required();
  at_cmd->add_option("--offline-samples", aa.offline_samples);

  ValidateArgs va;
  auto* va_cmd = app.add_subcommand("validate", "Run an empirical theory check");
  va_cmd->add_option("which", va.which)
      ->required()
      ->check(CLI::IsMember({"theorem1", "variance", "codebook-lemma", "separability"}));
  va_cmd->add_option("--d", va.d);
  va_cmd->add_option("--trials", va.trials);
  va_cmd->add_option("--base-size", va.base_size);
  va_cmd->add_option("--samples", va.samples);
  va_cmd->add_option("--level", va.level);
  va_cmd->add_option("--variance-levels", va.levels)->delimiter(',');
  va_cmd->add_option("--eps", va.eps)->delimiter(',');

  BenchArgs ba;
  auto* b_cmd = app.add_subcommand("bench", "Wall-clock encode/decode/attend throughput");
  ba.config.add_to(b_cmd);
  b_cmd->add_option("--n", ba.n);
  b_cmd->add_option("--d", ba.d);
  b_cmd->add_option("--queries", ba.queries);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what(), 2);
    return 2;
  }

  try {
    pq::set_thread_count(g.threads);
    if (*gen_cmd) run_gen(g, gen);
    if (*cb_cmd) run_codebook(g, cb);
    if (*q_cmd) run_quantize(g, qa);
    if (*dq_cmd) run_dequantize(g, da);
    if (*st_cmd) run_stats(g, sa);
    if (*at_cmd) run_attend(g, aa);
    if (*va_cmd) run_validate(g, va);
    if (*b_cmd) run_bench(g, ba);
  } catch (const CLI::ParseError& e) {
    print_error("usage", e.what(), 2);
    return 2;
  } catch (const pq::FormatError& e) {
    print_error("format", e.what(), 1);
    return 1;
  } catch (const std::exception& e) {
    print_error("runtime", e.what(), 1);
    return 1;
  }
  return 0;
}
