#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "layercache/engine.hpp"

namespace layercache {

struct serve_options {
  std::size_t max_frame_bytes = 64ull << 20;
  // supplies the maintenance/trigger state for {"report": true} requests
  std::function<nlohmann::json()> report_fn;
};

// stream-socket daemon speaking length-prefixed (4-byte big-endian) json
// frames. each connection gets a thread; batches stream one response per
// sample as soon as its exit resolves it.
class inference_server {
 public:
  inference_server(std::shared_ptr<const cache_enabled_model> model,
                   serve_options opts = {});
  ~inference_server();

  inference_server(const inference_server&) = delete;
  inference_server& operator=(const inference_server&) = delete;

  void start(std::uint16_t port);  // port 0 picks an ephemeral port
  std::uint16_t port() const { return port_; }
  void stop();

 private:
  void accept_loop();
  void handle_connection(int fd);

  std::shared_ptr<const cache_enabled_model> model_;
  serve_options opts_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> running_{false};
  std::thread accept_thread_;
  std::mutex mu_;
  std::vector<std::thread> workers_;
  std::vector<int> live_fds_;
};

}  // namespace layercache
