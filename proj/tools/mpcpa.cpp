// mpcpa: command-line experiment runner.
//
//   mpcpa run --config exp.json --out runs/a [--seed N] [--jobs N] [--arm NAME]
//   mpcpa report runs/a runs/b [--tsv table.tsv]
//   mpcpa audit --run runs/a [--delta D] [--mia-size N] [--out audit.json]
//
// Failures print one line, "error: <Class>: <message>", and exit nonzero.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mpcpa/error.hpp"
#include "mpcpa/experiment.hpp"

namespace ex = mpcpa::experiment;

namespace {

int fail(const char* kind, const std::string& message, int code) {
  std::string line = message;
  for (char& c : line) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  std::cerr << "error: " << kind << ": " << line << '\n';
  return code;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  if (!out) throw mpcpa::FormatError("cannot write " + path);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-party collaborative learning simulator"};
  app.require_subcommand(1);

  std::string config_path, out_dir, arm;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  auto* run = app.add_subcommand("run", "Run one experiment arm and persist its artifacts");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--out", out_dir, "Output directory (must not exist or be empty)")->required();
  run->add_option("--seed", seed, "Override the global seed");
  run->add_option("--jobs", jobs, "Parallelism degree")->check(CLI::PositiveNumber);
  run->add_option("--arm", arm, "Override run.arm")
      ->check(CLI::IsMember({"mpcpa", "fedavg", "centralized", "ablation_grid", "gen_count_sweep", "audit", "bvc"}));

  std::vector<std::string> report_dirs;
  std::string tsv_path;
  auto* report = app.add_subcommand("report", "Compare persisted runs");
  report->add_option("dirs", report_dirs, "Run directories")->required();
  report->add_option("--tsv", tsv_path, "Also write the table as TSV");

  std::string audit_dir, audit_out;
  std::optional<double> delta;
  std::optional<std::size_t> mia_size;
  auto* audit = app.add_subcommand("audit", "Privacy audit of a persisted mpcpa or audit run");
  audit->add_option("--run", audit_dir, "Run directory")->required();
  audit->add_option("--delta", delta, "Memorization threshold");
  audit->add_option("--mia-size", mia_size, "Members and non-members per client");
  audit->add_option("--out", audit_out, "Write the audit JSON here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("UsageError", e.what(), 64);
  }

  try {
    if (*run) {
      auto cfg = ex::ExperimentConfig::load(config_path);
      if (seed) cfg.seed = *seed;
      if (!arm.empty()) cfg.arm.kind = ex::parse_arm(arm);
      cfg.validate();
      const auto rep = ex::cmd_run(cfg, out_dir, {jobs});
      std::cout << ex::render_report(rep);
    } else if (*report) {
      std::vector<std::filesystem::path> dirs(report_dirs.begin(), report_dirs.end());
      const auto table = ex::cmd_report(dirs);
      std::cout << table.text;
      if (!tsv_path.empty()) write_text(tsv_path, table.tsv);
    } else if (*audit) {
      const std::string json = ex::audit_run_directory(audit_dir, delta, mia_size).dump(2) + "\n";
      if (audit_out.empty()) std::cout << json;
      else write_text(audit_out, json);
    }
  } catch (const mpcpa::ConfigError& e) {
    return fail("ConfigError", e.what(), 2);
  } catch (const mpcpa::InvalidInput& e) {
    return fail("InvalidInput", e.what(), 2);
  } catch (const mpcpa::FormatError& e) {
    return fail("FormatError", e.what(), 3);
  } catch (const mpcpa::ProtocolError& e) {
    return fail("ProtocolError", e.what(), 4);
  } catch (const std::filesystem::filesystem_error& e) {
    return fail("IOError", e.what(), 3);
  } catch (const std::exception& e) {
    return fail("InternalError", e.what(), 1);
  }
  return 0;
}
