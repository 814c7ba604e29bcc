#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include "sfuda/common.hpp"
#include "sfuda/oracle.hpp"
#include "sfuda/wire.hpp"

namespace sfuda {

// OracleApi over the length-prefixed JSON protocol.
class TcpOracle final : public OracleApi {
 public:
  TcpOracle(const std::string& host, int port) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0)
      throw IoError("cannot resolve oracle host: " + host);
    fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd_ < 0 || ::connect(fd_, res->ai_addr, res->ai_addrlen) != 0) {
      ::freeaddrinfo(res);
      if (fd_ >= 0) ::close(fd_);
      throw IoError("cannot connect to oracle at " + host + ":" + std::to_string(port));
    }
    ::freeaddrinfo(res);
  }

  ~TcpOracle() override {
    if (fd_ >= 0) ::close(fd_);
  }

  TcpOracle(const TcpOracle&) = delete;
  TcpOracle& operator=(const TcpOracle&) = delete;

  int num_classes() override {
    const nlohmann::json r = roundtrip({{"op", "info"}});
    return r.at("num_classes").get<int>();
  }

  std::uint64_t open() override {
    const nlohmann::json r = roundtrip({{"op", "open"}});
    return r.at("session").get<std::uint64_t>();
  }

  int submit(std::uint64_t session, const ImageTensor& batch) override {
    nlohmann::json msg = wire::encode_batch(batch);
    msg["op"] = "submit";
    msg["session"] = session;
    const nlohmann::json r = roundtrip(msg);
    if (r.contains("rejected"))
      throw BoundaryViolationError(
          "oracle rejected batch", r.at("rejected").get<std::vector<std::string>>());
    return r.at("accepted").get<int>();
  }

  std::vector<int> finalize(std::uint64_t session) override {
    const nlohmann::json r = roundtrip({{"op", "finalize"}, {"session", session}});
    return r.at("labels").get<std::vector<int>>();
  }

 private:
  nlohmann::json roundtrip(const nlohmann::json& msg) {
    wire::send_message(fd_, msg);
    nlohmann::json reply;
    if (!wire::recv_message(fd_, reply))
      throw IoError("oracle connection closed");
    if (reply.contains("error")) {
      const std::string what = reply.at("error").get<std::string>();
      const std::string category = reply.value("category", "runtime");
      if (category == "protocol") throw ProtocolError(what);
      if (category == "corruption") throw CorruptionError(what);
      throw Error(what);
    }
    return reply;
  }

  int fd_ = -1;
};

// "inproc" or "tcp://host:port"
struct OracleEndpoint {
  bool inproc = true;
  std::string host;
  int port = 0;

  static OracleEndpoint parse(const std::string& s) {
    OracleEndpoint e;
    if (s == "inproc") return e;
    const std::string prefix = "tcp://";
    if (s.rfind(prefix, 0) != 0)
      throw ConfigError("oracle endpoint must be 'inproc' or 'tcp://host:port'");
    const std::string rest = s.substr(prefix.size());
    const auto colon = rest.rfind(':');
    if (colon == std::string::npos)
      throw ConfigError("oracle endpoint missing port: " + s);
    e.inproc = false;
    e.host = rest.substr(0, colon);
    try {
      e.port = std::stoi(rest.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("bad oracle port in: " + s);
    }
    if (e.host.empty() || e.port <= 0 || e.port > 65535)
      throw ConfigError("bad oracle endpoint: " + s);
    return e;
  }
};

}  // namespace sfuda
