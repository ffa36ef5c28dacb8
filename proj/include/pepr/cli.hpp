#pragma once

// The `pepr` command line: gen-data, train, eval, compare, ablate,
// check-grads, verify. Exit status 0 on success, 1 on validation errors, 2 on
// runtime failures. Diagnostics go to stderr; machine output goes to files.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "pepr/config.hpp"
#include "pepr/dataset.hpp"
#include "pepr/eval.hpp"
#include "pepr/gradcheck.hpp"
#include "pepr/report.hpp"
#include "pepr/testing/verify.hpp"
#include "pepr/training.hpp"

namespace pepr::cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline unsigned num_workers() {
  if (const char* env = std::getenv("PEPR_NUM_WORKERS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ValidationError("PEPR_NUM_WORKERS must be a positive integer");
    return static_cast<unsigned>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

inline void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  data::write_file(path, j.dump(2) + "\n");
}

// ---------------------------------------------------------------- train

struct TrainOutcome {
  fs::path dir;
  TrainRun run;
};

// Trains one run and writes config.json, metrics.jsonl, full.ckpt,
// inference.ckpt and summary.json into `out`.
inline TrainOutcome train_to_dir(const config::RunConfig& cfg, const data::Manifest& manifest, const fs::path& out) {
  fs::create_directories(out);
  write_json(out / "config.json", config::resolved(cfg));
  TrainOutcome o;
  o.dir = out;
  o.run = train_run(manifest, cfg.train, cfg.model);
  std::string log;
  for (const auto& rec : o.run.log) log += rec.dump() + "\n";
  data::write_file(out / "metrics.jsonl", log);
  json summary{{"method", to_string(o.run.config.method)},
               {"task", to_string(o.run.config.task)},
               {"seed", o.run.config.seed},
               {"steps", o.run.log.size()},
               {"total_steps", o.run.total_steps},
               {"warmup_iters", o.run.warmup_iters},
               {"wall_seconds", o.run.wall_seconds},
               {"diverged", o.run.diverged}};
  if (o.run.diverged) {
    summary["diagnostic"] = o.run.diagnostic;
    write_json(out / "summary.json", summary);
    throw DivergenceError("training diverged (" + o.run.diagnostic + "); log in " + (out / "metrics.jsonl").string());
  }
  const ParameterStore<float> inference = inference_params(o.run.params);
  summary["checksum_full"] = params_checksum(o.run.params);
  summary["checksum_inference"] = params_checksum(inference);
  checkpoint::save(o.run.params, checkpoint_header(cfg.model, o.run.config, "full"), (out / "full.ckpt").string());
  checkpoint::save(inference, checkpoint_header(cfg.model, o.run.config, "inference"),
                   (out / "inference.ckpt").string());
  write_json(out / "summary.json", summary);
  return o;
}

// ---------------------------------------------------------------- eval

inline json eval_document(const checkpoint::Archive<float>& ckpt, const std::vector<DomainResult>& results,
                          const std::string& ckpt_path) {
  json rs = json::array();
  for (const auto& r : results) rs.push_back(to_json(r));
  return {{"checkpoint", ckpt_path},
          {"method", ckpt.header.value("method", "unknown")},
          {"seed", ckpt.header.value("seed", std::uint64_t{0})},
          {"task", ckpt.header.value("task", "segmentation")},
          {"results", rs}};
}

inline json eval_checkpoint(const fs::path& ckpt_path, const fs::path& data_dir, const std::vector<std::string>& domains,
                            const EvalOptions& opts, const fs::path& out) {
  const auto ckpt = checkpoint::load<float>(ckpt_path.string());
  const auto manifest = data::load_manifest(data_dir);
  const auto results = evaluate_domains(ckpt, manifest, domains, opts);
  for (const auto& r : results)
    if (r.error) std::cerr << "eval: domain " << r.domain << ": " << *r.error << "\n";
  const json doc = eval_document(ckpt, results, ckpt_path.string());
  write_json(out, doc);
  return doc;
}

inline report::RunResult run_result_from_eval(const json& doc) {
  report::RunResult r;
  r.method = doc.at("method").get<std::string>();
  r.seed = doc.at("seed").get<std::uint64_t>();
  for (const auto& d : doc.at("results")) r.domains.push_back(domain_result_from_json(d));
  return r;
}

// Every eval.json under the given paths, in sorted path order.
inline std::vector<fs::path> find_eval_files(const std::vector<std::string>& roots) {
  std::vector<fs::path> out;
  for (const auto& root : roots) {
    const fs::path p(root);
    if (!fs::exists(p)) throw ValidationError("compare: no such run directory: " + root);
    if (fs::is_regular_file(p)) {
      out.push_back(p);
      continue;
    }
    for (const auto& e : fs::recursive_directory_iterator(p))
      if (e.is_regular_file() && e.path().filename() == "eval.json") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// ---------------------------------------------------------------- ablate

struct GridPoint {
  std::string label;
  std::string dir;
  json settings;
  config::RunConfig cfg;
};

inline std::vector<GridPoint> ablation_grid(const std::string& axis, const config::RunConfig& base) {
  std::vector<GridPoint> out;
  if (axis == "patch") {
    for (int s : {2, 4})
      for (int m : {2, 4}) {
        GridPoint g;
        g.label = "s=" + std::to_string(s) + ",M=" + std::to_string(m);
        g.dir = "s" + std::to_string(s) + "_M" + std::to_string(m);
        g.settings = {{"patch_size", s}, {"num_patches", m}};
        g.cfg = base;
        g.cfg.train.method = Method::pepr;
        g.cfg.train.sampler.patch_size = s;
        g.cfg.train.sampler.num_patches = m;
        out.push_back(g);
      }
  } else if (axis == "loss") {
    const std::pair<double, double> pairs[] = {{1, 0.5}, {1, 0.1}, {0.5, 1}, {0.1, 1}, {1, 1}};
    for (const auto& [t, f] : pairs) {
      GridPoint g;
      g.label = "task=" + report::fmt("%g", t) + ",feat=" + report::fmt("%g", f);
      g.dir = "task" + report::fmt("%g", t) + "_feat" + report::fmt("%g", f);
      g.settings = {{"task", t}, {"feat", f}};
      g.cfg = base;
      g.cfg.train.method = Method::pepr;
      g.cfg.train.loss = {t, f};
      out.push_back(g);
    }
  } else {
    throw ValidationError("ablate: unknown axis '" + axis + "' (expected patch or loss)");
  }
  for (auto& g : out) g.cfg.train.validate();
  return out;
}

inline json run_ablation(const std::string& axis, const config::RunConfig& base, const fs::path& data_dir,
                         const fs::path& out_dir, int seeds, unsigned workers) {
  const auto manifest = data::load_manifest(data_dir);
  auto grid = ablation_grid(axis, base);
  struct Job {
    std::size_t point;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (std::size_t p = 0; p < grid.size(); ++p)
    for (int s = 0; s < seeds; ++s) jobs.push_back({p, base.train.seed + static_cast<std::uint64_t>(s)});

  std::vector<report::AblationPoint> points(grid.size());
  for (std::size_t p = 0; p < grid.size(); ++p) {
    points[p].label = grid[p].label;
    points[p].settings = grid[p].settings;
  }
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  auto worker = [&] {
    for (;;) {
      const std::size_t j = next.fetch_add(1);
      if (j >= jobs.size()) return;
      {
        std::lock_guard lock(mu);
        if (first_error) return;
      }
      try {
        config::RunConfig cfg = grid[jobs[j].point].cfg;
        cfg.train.seed = jobs[j].seed;
        const fs::path dir = out_dir / grid[jobs[j].point].dir / ("seed" + std::to_string(jobs[j].seed));
        const TrainOutcome o = train_to_dir(cfg, manifest, dir);
        checkpoint::Archive<float> ckpt{checkpoint_header(cfg.model, o.run.config, "inference"),
                                        inference_params(o.run.params)};
        const auto results = evaluate_domains(ckpt, manifest, cfg.eval_domains, cfg.eval);
        write_json(dir / "eval.json", eval_document(ckpt, results, (dir / "inference.ckpt").string()));
        std::lock_guard lock(mu);
        points[jobs[j].point].runs.push_back({"pepr", jobs[j].seed, results});
        std::cerr << "ablate: " << grid[jobs[j].point].label << " seed " << jobs[j].seed << " done\n";
      } catch (...) {
        std::lock_guard lock(mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(jobs.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned i = 0; i < n; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);
  for (auto& p : points)
    std::sort(p.runs.begin(), p.runs.end(), [](const auto& a, const auto& b) { return a.seed < b.seed; });
  const json rep = report::build_ablation(axis, axis == "patch" ? "Patch size, M" : "lambda_task, lambda_feat", points);
  report::write_report(rep, out_dir);
  return rep;
}

// ---------------------------------------------------------------- dispatch

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s + ",") {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  return out;
}

inline int run(int argc, const char* const* argv) {
  CLI::App app{"pepr: privileged event-based predictive regularization at desk scale"};
  app.require_subcommand(1);

  std::string config_path, out, data_dir, method, ckpt, domains = "day,dusk,night", axis, suite;
  std::vector<std::string> runs;
  std::uint64_t seed = 0;
  int seeds = 1;
  std::string audit_path;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  gen->add_option("--config", config_path, "run config (JSON)")->required();
  gen->add_option("--out", out, "dataset directory (overrides data_dir)");

  auto* train = app.add_subcommand("train", "train one model");
  train->add_option("--config", config_path, "run config (JSON)")->required();
  train->add_option("--method", method, "rgb_only | l2_align | pepr")->required();
  auto* seed_opt = train->add_option("--seed", seed, "training seed (overrides the config)");
  train->add_option("--data", data_dir, "dataset directory (overrides data_dir)");
  train->add_option("--out", out, "run directory (default: <output_dir>/<method>/seed<N>)");

  auto* eval = app.add_subcommand("eval", "evaluate an inference checkpoint");
  eval->add_option("--ckpt", ckpt, "inference.ckpt")->required();
  eval->add_option("--data", data_dir, "dataset directory")->required();
  eval->add_option("--domains", domains, "comma-separated domain list");
  eval->add_option("--out", out, "results file (default: eval.json beside the checkpoint)");
  eval->add_option("--audit-log", audit_path, "write the list of files opened for reading");

  auto* compare = app.add_subcommand("compare", "build a comparison report from eval results");
  compare->add_option("--runs", runs, "run directories (searched for eval.json)")->required();
  compare->add_option("--out", out, "report directory")->required();

  auto* ablate = app.add_subcommand("ablate", "run an ablation grid");
  ablate->add_option("--axis", axis, "patch | loss")->required();
  ablate->add_option("--config", config_path, "run config (JSON)")->required();
  ablate->add_option("--data", data_dir, "dataset directory (overrides data_dir)");
  ablate->add_option("--out", out, "ablation directory (default: <output_dir>/ablate_<axis>)");
  ablate->add_option("--seeds", seeds, "seeds per grid point")->check(CLI::PositiveNumber);

  auto* grads = app.add_subcommand("check-grads", "finite-difference gradient verification");
  grads->add_option("--config", config_path, "run config (JSON)")->required();
  grads->add_option("--out", out, "report file");

  auto* verify = app.add_subcommand("verify", "oracle-equivalence suites");
  verify->add_option("--suite", suite, "simulator | losses | metrics | sampler | all")->required();
  verify->add_option("--out", out, "report file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cerr << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*gen) {
      config::RunConfig cfg = config::load(config_path);
      const fs::path dir = out.empty() ? fs::path(cfg.data_dir) : fs::path(out);
      require(!dir.empty(), "gen-data: no output directory (use --out or data_dir)");
      cfg.data_dir = dir.string();
      cfg.data.workers = num_workers();
      data::generate_dataset(cfg.data, dir);
      write_json(dir / "config.json", config::resolved(cfg));
      return 0;
    }
    if (*train) {
      config::RunConfig cfg = config::load(config_path);
      cfg.train.method = method_from_string(method);
      if (*seed_opt) cfg.train.seed = seed;
      cfg.train = cfg.train.resolved();
      if (!data_dir.empty()) cfg.data_dir = data_dir;
      require(!cfg.data_dir.empty(), "train: no dataset directory (use --data or data_dir)");
      fs::path dir = out;
      if (dir.empty()) {
        require(!cfg.output_dir.empty(), "train: no run directory (use --out or output_dir)");
        dir = fs::path(cfg.output_dir) / method / ("seed" + std::to_string(cfg.train.seed));
      }
      cfg.output_dir = dir.string();
      train_to_dir(cfg, data::load_manifest(cfg.data_dir), dir);
      return 0;
    }
    if (*eval) {
      const fs::path dest = out.empty() ? fs::path(ckpt).parent_path() / "eval.json" : fs::path(out);
      if (!audit_path.empty()) audit::start();
      const json doc = eval_checkpoint(ckpt, data_dir, split_list(domains), EvalOptions{}, dest);
      if (!audit_path.empty()) {
        json opened = audit::stop();
        write_json(audit_path, opened);
      }
      bool any_ok = false;
      for (const auto& r : doc["results"]) any_ok = any_ok || !r.contains("error");
      return any_ok ? 0 : 2;
    }
    if (*compare) {
      std::vector<report::RunResult> results;
      for (const auto& f : find_eval_files(runs)) {
        json doc;
        try {
          doc = json::parse(data::read_file(f));
        } catch (const json::parse_error& e) {
          throw ValidationError("compare: malformed " + f.string() + " (" + e.what() + ")");
        }
        results.push_back(run_result_from_eval(doc));
      }
      require(!results.empty(), "compare: no eval.json found under the given run directories");
      report::write_report(results, out);
      return 0;
    }
    if (*ablate) {
      config::RunConfig cfg = config::load(config_path);
      if (!data_dir.empty()) cfg.data_dir = data_dir;
      require(!cfg.data_dir.empty(), "ablate: no dataset directory (use --data or data_dir)");
      fs::path dir = out;
      if (dir.empty()) {
        require(!cfg.output_dir.empty(), "ablate: no output directory (use --out or output_dir)");
        dir = fs::path(cfg.output_dir) / ("ablate_" + axis);
      }
      ablation_grid(axis, cfg);  // validates the axis before any work
      run_ablation(axis, cfg, cfg.data_dir, dir, seeds, num_workers());
      return 0;
    }
    if (*grads) {
      const config::RunConfig cfg = config::load(config_path);
      gradcheck::Options opt;
      opt.seed = cfg.seed;
      json reports = json::array();
      bool ok = true;
      auto check = [&](gradcheck::Composite c) {
        const auto rep = gradcheck::gradient_check(c.store, c.loss, opt, {}, c.name);
        ok = ok && rep.passed;
        reports.push_back(rep.to_json());
        std::cerr << "check-grads: " << c.name << (rep.passed ? " ok" : " FAILED") << "\n";
      };
      check(gradcheck::linear_probe(cfg.seed));
      for (auto& c : gradcheck::model_composites(cfg.seed)) check(std::move(c));
      if (!out.empty()) write_json(out, {{"passed", ok}, {"composites", reports}});
      return ok ? 0 : 2;
    }
    if (*verify) {
      bool ok = true;
      json reports = json::array();
      for (const auto& r : verify::run(suite)) {
        ok = ok && r.passed;
        reports.push_back(r.to_json());
        std::cerr << "verify: " << r.name << " (" << r.cases << " cases) " << (r.passed ? "ok" : "FAILED") << "\n";
        for (const auto& f : r.failures) std::cerr << "  " << f << "\n";
      }
      if (!out.empty()) write_json(out, {{"passed", ok}, {"suites", reports}});
      return ok ? 0 : 2;
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace pepr::cli
