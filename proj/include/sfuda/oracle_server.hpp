#pragma once

#include <atomic>
#include <cstdint>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "sfuda/common.hpp"
#include "sfuda/oracle.hpp"
#include "sfuda/wire.hpp"

namespace sfuda {

// Serves an OracleService over a loopback-or-LAN stream socket. One thread
// per connection; the service itself serializes session state. Responses
// carry integers only — labels, counts, ids — never per-class reals.
class OracleServer {
 public:
  // port 0 picks an ephemeral port, readable via port()
  OracleServer(OracleService& svc, int port) : svc_(&svc) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw IoError("socket() failed");
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      ::close(listen_fd_);
      throw IoError("bind() failed on port " + std::to_string(port));
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    if (::listen(listen_fd_, 16) != 0) {
      ::close(listen_fd_);
      throw IoError("listen() failed");
    }
  }

  ~OracleServer() { stop(); }

  int port() const { return port_; }

  void start() {
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  void stop() {
    if (stopping_.exchange(true)) return;
    if (listen_fd_ >= 0) {
      ::shutdown(listen_fd_, SHUT_RDWR);
      ::close(listen_fd_);
      listen_fd_ = -1;
    }
    if (accept_thread_.joinable()) accept_thread_.join();
    std::lock_guard<std::mutex> lock(conn_mu_);
    for (auto& t : conn_threads_)
      if (t.joinable()) t.join();
    conn_threads_.clear();
  }

  // blocks until stop() (for the CLI serve command)
  void run() {
    accept_loop();
  }

 private:
  void accept_loop() {
    while (!stopping_.load()) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) break;  // listen socket closed
      std::lock_guard<std::mutex> lock(conn_mu_);
      conn_threads_.emplace_back([this, fd] { serve_connection(fd); });
    }
  }

  void serve_connection(int fd) {
    nlohmann::json msg;
    try {
      while (wire::recv_message(fd, msg)) {
        nlohmann::json reply;
        try {
          reply = dispatch(msg);
        } catch (const ProtocolError& e) {
          reply = {{"error", e.what()}, {"category", "protocol"}};
        } catch (const CorruptionError& e) {
          reply = {{"error", e.what()}, {"category", "corruption"}};
        } catch (const Error& e) {
          reply = {{"error", e.what()}, {"category", "runtime"}};
        }
        wire::send_message(fd, reply);
      }
    } catch (const std::exception&) {
      // drop the connection; sessions survive for a reconnecting client
    }
    ::close(fd);
  }

  nlohmann::json dispatch(const nlohmann::json& msg) {
    const std::string op = msg.value("op", "");
    if (op == "open") {
      return {{"session", svc_->open()}};
    }
    if (op == "submit") {
      const std::uint64_t session = msg.at("session").get<std::uint64_t>();
      const ImageTensor batch = wire::decode_batch(msg);
      const SubmitResult r = svc_->submit(session, batch);
      if (!r.rejected_ids.empty()) return {{"rejected", r.rejected_ids}};
      return {{"accepted", r.accepted}};
    }
    if (op == "finalize") {
      const std::uint64_t session = msg.at("session").get<std::uint64_t>();
      return {{"labels", svc_->finalize(session)}};
    }
    if (op == "info") {
      return {{"num_classes", svc_->num_classes()}};
    }
    throw ProtocolError("unknown op: " + op);
  }

  OracleService* svc_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::thread accept_thread_;
  std::vector<std::thread> conn_threads_;
  std::mutex conn_mu_;
  std::atomic<bool> stopping_{false};
};

}  // namespace sfuda
