#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <memory>
#include <string>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "layercache/errors.hpp"
#include "layercache/pipeline.hpp"
#include "layercache/serve.hpp"

namespace {

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop.store(true); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cache-enabled inference pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("-c,--config", config_path, "pipeline config json")->required();

  auto* cmd_candidates =
      app.add_subcommand("candidates", "list layers eligible for a cache");
  auto* cmd_collect =
      app.add_subcommand("collect", "tap activations and output pds from traffic");
  auto* cmd_search =
      app.add_subcommand("search", "pick a cache architecture per candidate layer");
  auto* cmd_train = app.add_subcommand("train-caches", "distill the selected caches");
  auto* cmd_calibrate =
      app.add_subcommand("calibrate", "fit temperatures and confidence thresholds");
  auto* cmd_optimize =
      app.add_subcommand("optimize", "choose the flop-optimal cache subset");
  auto* cmd_evaluate =
      app.add_subcommand("evaluate", "score the cache-enabled model against labels");
  auto* cmd_serve = app.add_subcommand("serve", "run the tcp inference daemon");
  auto* cmd_report = app.add_subcommand("report", "summarize pipeline state");

  int port = -1;
  cmd_serve->add_option("-p,--port", port, "listen port (overrides config)");

  // let `layercache <stage> -c cfg` work as well as `layercache -c cfg <stage>`
  for (auto* sub : app.get_subcommands(nullptr)) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    const auto cfg = layercache::pipeline_config::load(config_path);

    if (cmd_candidates->parsed()) {
      layercache::run_candidates(cfg);
      std::printf("candidate list written to %s\n",
                  (cfg.artifacts / "candidates.json").string().c_str());
    } else if (cmd_collect->parsed()) {
      layercache::run_collect(cfg);
      std::printf("medial datasets written to %s\n",
                  (cfg.artifacts / "medial").string().c_str());
    } else if (cmd_search->parsed()) {
      layercache::run_search(cfg);
      std::printf("architecture choices written to %s\n",
                  (cfg.artifacts / "search").string().c_str());
    } else if (cmd_train->parsed()) {
      layercache::run_train_caches(cfg);
      std::printf("caches written to %s\n", (cfg.artifacts / "caches").string().c_str());
    } else if (cmd_calibrate->parsed()) {
      layercache::run_calibrate(cfg);
      std::printf("calibration written to %s\n",
                  (cfg.artifacts / "calibration").string().c_str());
    } else if (cmd_optimize->parsed()) {
      layercache::run_optimize(cfg);
      std::printf("subset choice written to %s\n",
                  (cfg.artifacts / "subset").string().c_str());
    } else if (cmd_evaluate->parsed()) {
      const auto rep = layercache::run_evaluate(cfg);
      std::fputs(rep.text().c_str(), stdout);
    } else if (cmd_report->parsed()) {
      std::fputs(layercache::run_report(cfg).c_str(), stdout);
    } else if (cmd_serve->parsed()) {
      auto model = std::make_shared<const layercache::cache_enabled_model>(
          layercache::load_enabled_model(cfg));

      layercache::serve_options opts;
      opts.max_frame_bytes = cfg.serve_max_frame_mb << 20;
      const auto state_path = cfg.artifacts / "state.json";
      const std::string hash = model->graph().content_hash();
      const double drift = cfg.drift_fraction;
      opts.report_fn = [state_path, hash, drift] {
        const auto st = layercache::maintenance_state::load(state_path);
        const auto trig = layercache::check_retrain_trigger(st, hash, drift);
        return nlohmann::json{{"collected", st.current_count},
                              {"last_build", st.last_build_count},
                              {"backbone_hash", hash},
                              {"trigger", layercache::trigger_name(trig)}};
      };

      layercache::inference_server server(model, opts);
      server.start(port >= 0 ? static_cast<std::uint16_t>(port) : cfg.serve_port);
      std::printf("listening on 127.0.0.1:%u\n", server.port());
      std::fflush(stdout);

      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      while (!g_stop.load()) {
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
      }
      server.stop();
    }
    return 0;
  } catch (const layercache::precondition_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const layercache::missing_blob_error& e) {
    // an absent input file is a precondition failure, not bad data
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const layercache::parse_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const layercache::data_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const layercache::shape_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const layercache::cycle_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
