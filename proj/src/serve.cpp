#include "layercache/serve.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cstring>

#include <nlohmann/json.hpp>

#include "layercache/errors.hpp"

namespace layercache {

using nlohmann::json;

namespace {

bool read_exact(int fd, void* buf, std::size_t len) {
  auto* p = static_cast<std::uint8_t*>(buf);
  while (len > 0) {
    const ssize_t n = ::recv(fd, p, len, 0);
    if (n <= 0) return false;
    p += n;
    len -= static_cast<std::size_t>(n);
  }
  return true;
}

bool write_exact(int fd, const void* buf, std::size_t len) {
  const auto* p = static_cast<const std::uint8_t*>(buf);
  while (len > 0) {
    const ssize_t n = ::send(fd, p, len, MSG_NOSIGNAL);
    if (n <= 0) return false;
    p += n;
    len -= static_cast<std::size_t>(n);
  }
  return true;
}

bool send_frame(int fd, const json& payload) {
  const std::string body = payload.dump();
  std::uint8_t hdr[4];
  const std::uint32_t len = static_cast<std::uint32_t>(body.size());
  hdr[0] = static_cast<std::uint8_t>(len >> 24);
  hdr[1] = static_cast<std::uint8_t>(len >> 16);
  hdr[2] = static_cast<std::uint8_t>(len >> 8);
  hdr[3] = static_cast<std::uint8_t>(len);
  return write_exact(fd, hdr, 4) && write_exact(fd, body.data(), body.size());
}

}  // namespace

inference_server::inference_server(std::shared_ptr<const cache_enabled_model> model,
                                   serve_options opts)
    : model_(std::move(model)), opts_(std::move(opts)) {
  if (!model_) throw precondition_error("inference_server needs a model");
}

inference_server::~inference_server() { stop(); }

void inference_server::start(std::uint16_t port) {
  if (running_) throw precondition_error("server already running");
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw error("socket() failed");
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));

  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw error("bind() failed on port " + std::to_string(port));
  }
  if (::listen(listen_fd_, 64) != 0) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw error("listen() failed");
  }
  socklen_t alen = sizeof(addr);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &alen);
  port_ = ntohs(addr.sin_port);

  running_ = true;
  accept_thread_ = std::thread([this] { accept_loop(); });
}

void inference_server::stop() {
  if (!running_.exchange(false)) return;
  if (listen_fd_ >= 0) {
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    listen_fd_ = -1;
  }
  {
    std::lock_guard<std::mutex> lock(mu_);
    for (int fd : live_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  if (accept_thread_.joinable()) accept_thread_.join();
  std::vector<std::thread> workers;
  {
    std::lock_guard<std::mutex> lock(mu_);
    workers.swap(workers_);
  }
  for (auto& t : workers) {
    if (t.joinable()) t.join();
  }
}

void inference_server::accept_loop() {
  while (running_) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (!running_) break;
      continue;
    }
    std::lock_guard<std::mutex> lock(mu_);
    live_fds_.push_back(fd);
    workers_.emplace_back([this, fd] { handle_connection(fd); });
  }
}

void inference_server::handle_connection(int fd) {
  const std::size_t input_size = tensor::product(model_->graph().input_shape());
  std::vector<char> body;

  while (running_) {
    std::uint8_t hdr[4];
    if (!read_exact(fd, hdr, 4)) break;
    const std::uint32_t len = (std::uint32_t(hdr[0]) << 24) | (std::uint32_t(hdr[1]) << 16) |
                              (std::uint32_t(hdr[2]) << 8) | std::uint32_t(hdr[3]);
    if (len > opts_.max_frame_bytes) {
      send_frame(fd, {{"error", "frame exceeds " +
                                    std::to_string(opts_.max_frame_bytes) + " bytes"}});
      break;  // oversized frame: protocol error, close
    }
    body.resize(len);
    if (!read_exact(fd, body.data(), len)) break;

    json req = json::parse(body.begin(), body.end(), nullptr, false);
    if (req.is_discarded() || !req.is_object()) {
      // malformed frame: report and keep the connection open
      send_frame(fd, {{"batch_id", nullptr}, {"error", "malformed frame"}});
      continue;
    }

    if (req.value("report", false)) {
      if (opts_.report_fn) {
        send_frame(fd, opts_.report_fn());
      } else {
        send_frame(fd, {{"error", "report unavailable"}});
      }
      continue;
    }

    const json batch_id = req.contains("batch_id") ? req["batch_id"] : json(nullptr);
    if (!req.contains("samples") || !req["samples"].is_array()) {
      send_frame(fd, {{"batch_id", batch_id}, {"error", "missing samples array"}});
      continue;
    }
    const auto& samples = req["samples"];
    if (samples.empty()) {
      send_frame(fd, {{"batch_id", batch_id}, {"error", "empty batch"}});
      continue;
    }

    std::vector<std::string> ids;
    std::vector<std::size_t> shape{samples.size()};
    for (std::size_t d : model_->graph().input_shape()) shape.push_back(d);
    tensor inputs(std::move(shape));
    bool ok = true;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      if (!s.is_object() || !s.contains("id") || !s.contains("values") ||
          !s["values"].is_array() || s["values"].size() != input_size) {
        send_frame(fd, {{"batch_id", batch_id},
                        {"error", "sample " + std::to_string(i) +
                                      " needs an id and " + std::to_string(input_size) +
                                      " values"}});
        ok = false;
        break;
      }
      ids.push_back(s["id"].is_string() ? s["id"].get<std::string>() : s["id"].dump());
      float* row = inputs.row(i);
      for (std::size_t v = 0; v < input_size; ++v) row[v] = s["values"][v].get<float>();
    }
    if (!ok) continue;

    bool write_failed = false;
    try {
      model_->infer_batch(inputs, ids, [&](const exit_record& rec) {
        json resp{{"batch_id", batch_id},
                  {"sample_id", rec.sample_id},
                  {"class", rec.predicted},
                  {"confidence", rec.confidence},
                  {"exit", rec.early ? "cache" : "final"},
                  {"path_flops", rec.path_flops}};
        if (rec.early) resp["exit_ordinal"] = rec.exit_ordinal;
        if (!send_frame(fd, resp)) write_failed = true;
      });
    } catch (const std::exception& e) {
      send_frame(fd, {{"batch_id", batch_id}, {"error", e.what()}});
    }
    if (write_failed) break;
  }

  ::close(fd);
  std::lock_guard<std::mutex> lock(mu_);
  live_fds_.erase(std::remove(live_fds_.begin(), live_fds_.end(), fd), live_fds_.end());
}

}  // namespace layercache
