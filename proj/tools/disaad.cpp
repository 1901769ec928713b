// disaad command-line driver.
#include <iostream>

#include <CLI11.hpp>

#include "disaad/pipeline.hpp"

using namespace disaad;

int main(int argc, char** argv) {
  CLI::App app{"DisAAD desk-scale pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::string workdir;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  app.add_option("-c,--config", config_path, "JSON config file (missing keys take defaults)");
  app.add_option("-w,--workdir", workdir, "work directory (overrides config 'workdir')");
  app.add_option("-s,--seed", seed, "master seed (overrides config 'seed')");
  app.add_option("--set", overrides, "override a config key, e.g. --set adversarial.lambda=0");

  auto* gen = app.add_subcommand("gen-world", "generate the synthetic fact world");
  auto* tt = app.add_subcommand("train-target", "train the sampled-only target model");
  auto* tp = app.add_subcommand("train-proxy", "pretrain the base proxy model");
  auto* col = app.add_subcommand("collect", "sample and filter the distillation set");
  auto* dis = app.add_subcommand("distill", "collect, then run adversarial distillation");
  auto* sc = app.add_subcommand("score", "score responses with the proxies");
  ScoreOptions sopt;
  sc->add_option("--responses", sopt.responses, "JSONL file of {id, prompt, response} (default: held-out answers)");
  sc->add_option("--proxy", sopt.proxy, "distilled | base | both")->check(CLI::IsMember({"distilled", "base", "both"}));
  auto* ev = app.add_subcommand("eval", "AUROC / AUPR / ECE of distilled vs base proxy");
  auto* th = app.add_subcommand("theory", "missing-mass decay and concentration experiments");
  auto* pd = app.add_subcommand("plotdata", "write CSV files for plotting");
  auto* all = app.add_subcommand("all", "gen-world through plotdata in order");
  auto* dc = app.add_subcommand("default-config", "print the full default config");

  CLI11_PARSE(app, argc, argv);

  try {
    json cfg = load_config(config_path);
    for (const auto& o : overrides) apply_override(cfg, o);
    if (!workdir.empty()) cfg["workdir"] = workdir;
    if (seed) cfg["seed"] = *seed;
    settings_from(cfg);

    if (dc->parsed()) {
      std::cout << cfg.dump(2) << '\n';
      return 0;
    }
    auto run = [&](const char* name, auto fn) {
      std::cout << "[" << name << "]\n";
      for (const auto& line : fn().lines) std::cout << "  " << line << '\n';
    };
    if (gen->parsed()) run("gen-world", [&] { return cmd_gen_world(cfg); });
    if (tt->parsed()) run("train-target", [&] { return cmd_train_target(cfg); });
    if (tp->parsed()) run("train-proxy", [&] { return cmd_train_proxy(cfg); });
    if (col->parsed()) run("collect", [&] { return cmd_collect(cfg); });
    if (dis->parsed()) run("distill", [&] { return cmd_distill(cfg); });
    if (sc->parsed()) run("score", [&] { return cmd_score(cfg, sopt); });
    if (ev->parsed()) run("eval", [&] { return cmd_eval(cfg); });
    if (th->parsed()) run("theory", [&] { return cmd_theory(cfg); });
    if (pd->parsed()) run("plotdata", [&] { return cmd_plotdata(cfg); });
    if (all->parsed()) {
      run("gen-world", [&] { return cmd_gen_world(cfg); });
      run("train-target", [&] { return cmd_train_target(cfg); });
      run("train-proxy", [&] { return cmd_train_proxy(cfg); });
      run("distill", [&] { return cmd_distill(cfg); });
      run("score", [&] { return cmd_score(cfg); });
      run("eval", [&] { return cmd_eval(cfg); });
      run("theory", [&] { return cmd_theory(cfg); });
      run("plotdata", [&] { return cmd_plotdata(cfg); });
    }
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const DomainError& e) {
    std::cerr << "error: numeric failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
