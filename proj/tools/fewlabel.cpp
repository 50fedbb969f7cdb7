// Command-line entry points: pretraining of label providers and the
// evaluation embedder, GAN training over the method registry, and report
// emission from metric logs.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

#include "fewlabel/cli.hpp"

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::istringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoull(item));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fewlabel: desk-scale training and evaluation of label-efficient conditional GANs"};
  app.require_subcommand(1);

  std::string manifest;
  std::string seeds_csv;
  fewlabel::CliOverrides overrides;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--manifest", manifest, "experiment manifest (key = value lines)")
        ->required();
    cmd->add_option("--seeds", seeds_csv, "comma-separated seed list (overrides the manifest)");
    cmd->add_option("--method", overrides.method, "restrict to one method (e.g. S3GAN)");
    cmd->add_option("--k-percent", overrides.k_percent, "labeled fraction in (0, 100]");
    cmd->add_option("--out", overrides.out_dir, "output directory (overrides the manifest)");
    cmd->add_flag("--dry-run", overrides.dry_run, "print the resolved configuration and exit");
  };

  auto* pretrain = app.add_subcommand(
      "pretrain", "train label providers (feature extractor, clusters, classifier) + embedder");
  add_common(pretrain);

  auto* train = app.add_subcommand("train", "train GAN methods and log metrics");
  add_common(train);

  std::string log_dir, report_out;
  auto* report = app.add_subcommand("report", "emit median/mean tables and bar charts from logs");
  report->add_option("logs", log_dir, "directory containing metrics.jsonl logs")->required();
  report->add_option("--out", report_out, "report output directory (default <logs>/report)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (!seeds_csv.empty()) overrides.seeds = parse_seeds(seeds_csv);
    if (pretrain->parsed()) return fewlabel::cmd_pretrain(manifest, overrides);
    if (train->parsed()) return fewlabel::cmd_train(manifest, overrides);
    if (report->parsed()) return fewlabel::cmd_report(log_dir, report_out);
  } catch (const fewlabel::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
