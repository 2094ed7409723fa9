#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "auxnas/commands.hpp"

using namespace auxnas;

namespace {

Config load_config(const std::string& path) {
  if (path.empty()) return Config{};
  return parse_config(io::read_file(path));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"auxnas: multi-task training with auxiliary modules and auxiliary-module search"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic multi-task dataset");
  std::string gen_config, gen_out;
  data::GenConfig g;
  gen->add_option("--config", gen_config, "config JSON (data section supplies defaults)");
  auto* seed_opt = gen->add_option("--seed", g.seed, "generator seed");
  auto* n_opt = gen->add_option("--n", g.n, "number of samples");
  auto* h_opt = gen->add_option("--height", g.height, "image height");
  auto* w_opt = gen->add_option("--width", g.width, "image width");
  auto* k_opt = gen->add_option("--classes", g.classes, "segmentation classes");
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train one strategy");
  std::string train_config, strategy, init_ckpt, train_out;
  train->add_option("--config", train_config, "config JSON");
  train->add_option("--strategy", strategy,
                    "single-tN, joint, prior-tN, ds-tN, kendall, auxi-tN, auxi-both or auxi-nas")
      ->required();
  train->add_option("--init-ckpt", init_ckpt, "single-task checkpoint for prior-tN and auxi-tN");
  train->add_option("--out", train_out, "output directory (overrides output_dir)");

  auto* search = app.add_subcommand("search", "search auxiliary modules");
  std::string search_config, search_out;
  search->add_option("--config", search_config, "config JSON");
  search->add_option("--out", search_out, "output directory (overrides output_dir)");

  auto* compare = app.add_subcommand("compare", "run a strategy x seed matrix and tabulate final metrics");
  std::string compare_config, strategies, seeds, compare_out;
  compare->add_option("--config", compare_config, "config JSON");
  compare->add_option("--strategies", strategies, "comma-separated strategy names")->required();
  compare->add_option("--seeds", seeds, "comma-separated seeds")->required();
  compare->add_option("--out", compare_out, "output directory (overrides output_dir)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ckpt, eval_data, split = "val";
  eval->add_option("--ckpt", ckpt, "checkpoint")->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--split", split, "split name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? exit_code::ok : exit_code::config;
  }

  auto with_config = [](const std::string& path, const std::string& out) {
    Config c = load_config(path);
    if (!out.empty()) c.output_dir = out;
    return c;
  };

  if (*gen)
    return guarded([&] {
      data::GenConfig gc = load_config(gen_config).gen;
      if (*seed_opt) gc.seed = g.seed;
      if (*n_opt) gc.n = g.n;
      if (*h_opt) gc.height = g.height;
      if (*w_opt) gc.width = g.width;
      if (*k_opt) gc.classes = g.classes;
      return cmd_gen_data(gc, gen_out);
    });
  if (*train)
    return guarded([&] { return cmd_train(with_config(train_config, train_out), strategy, init_ckpt); });
  if (*search) return guarded([&] { return cmd_search(with_config(search_config, search_out)); });
  if (*compare)
    return guarded([&] { return cmd_compare(with_config(compare_config, compare_out), strategies, seeds); });
  if (*eval) return guarded([&] { return cmd_eval(ckpt, eval_data, split); });
  return exit_code::config;
}
