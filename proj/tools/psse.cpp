#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "psse/pipeline.hpp"

int main(int argc, char** argv) {
  using namespace psse;
  CLI::App app{"Plan-space state embedding workflow: gen-demos, train-embed, eval-embed, train-rl, compare"};
  app.require_subcommand(1);

  struct Args {
    std::string config;
    std::string out;
    std::map<std::string, std::string> values;
  };
  std::map<std::string, Args> args;
  std::map<std::string, CLI::App*> subs;
  for (const auto& name : commands()) {
    auto* sub = app.add_subcommand(name);
    auto& a = args[name];
    sub->add_option("--config", a.config, "JSON config file or a run_manifest.json");
    sub->add_option("--out", a.out, "output directory")->required();
    for (const auto& [key, value] : default_config().items()) sub->add_option("--" + key, a.values[key], value.dump());
    subs[name] = sub;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return exit_usage;
  }

  for (const auto& [name, sub] : subs) {
    if (!sub->parsed()) continue;
    const auto& a = args[name];
    try {
      std::map<std::string, std::string> flags;
      for (const auto& [key, text] : a.values)
        if (sub->count("--" + key) > 0) flags[key] = text;
      const auto cfg = resolve_config(a.config.empty() ? std::nullopt : std::optional<fs::path>(a.config), flags);
      return run_command(name, cfg, a.out, std::cerr);
    } catch (const UsageError& e) {
      std::cerr << "psse " << name << ": " << e.what() << "\n";
      return exit_usage;
    }
  }
  return exit_usage;
}
