#include <catch2/catch_amalgamated.hpp>

#include <thread>

#include "sfuda/oracle.hpp"
#include "sfuda/oracle_client.hpp"
#include "sfuda/oracle_server.hpp"
#include "sfuda/wire.hpp"
#include "test_util.hpp"

using namespace sfuda;

namespace {

Model seeded_linear_model(int input_dim, int k, std::uint64_t param_seed) {
  Model m = build_mlp(input_dim, {}, k, Seed{1});
  Rng rng(param_seed);
  for (float& v : m.params()) v = static_cast<float>(rng.normal() * 0.5);
  return m;
}

OracleService make_service(std::uint64_t seed, const ImageTensor* forbidden) {
  std::vector<Model> models;
  models.push_back(seeded_linear_model(6, 4, seed));
  models.push_back(seeded_linear_model(6, 4, seed + 1));
  SourceEnsemble ens(std::move(models), 4);
  if (forbidden) ens.register_forbidden(*forbidden);
  return OracleService(std::move(ens));
}

}  // namespace

TEST_CASE("base64 round-trips binary data", "[transport]") {
  Rng rng(5);
  for (const size_t len : {0u, 1u, 2u, 3u, 4u, 17u, 300u}) {
    std::vector<std::uint8_t> bytes(len);
    for (auto& b : bytes) b = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    const std::string enc = wire::base64_encode(bytes.data(), bytes.size());
    CHECK(wire::base64_decode(enc) == bytes);
  }
  CHECK(wire::base64_encode("abc", 3) == "YWJj");
  CHECK_THROWS_AS(wire::base64_decode("a==="), CorruptionError);
}

TEST_CASE("tcp and in-process oracles return bit-identical labels",
          "[transport]") {
  const auto forbidden = testutil::random_images(4, 1, 1, 6, 30);
  const auto x = testutil::random_images(19, 1, 1, 6, 31);

  OracleService svc_local = make_service(900, &forbidden);
  InProcOracle local(svc_local);
  const auto want = local.query_dataset(UnlabeledDataset::from_images(x), 7);

  OracleService svc_remote = make_service(900, &forbidden);
  OracleServer server(svc_remote, 0);
  server.start();
  {
    TcpOracle remote("127.0.0.1", server.port());
    CHECK(remote.num_classes() == 4);
    const auto got = remote.query_dataset(UnlabeledDataset::from_images(x), 7);
    CHECK(got == want);
  }
  server.stop();
}

TEST_CASE("rejections and protocol errors cross the wire intact",
          "[transport]") {
  const auto forbidden = testutil::random_images(4, 1, 1, 6, 32);
  OracleService svc = make_service(905, &forbidden);
  OracleServer server(svc, 0);
  server.start();
  {
    TcpOracle remote("127.0.0.1", server.port());
    const auto id = remote.open();

    ImageTensor bad(2, 1, 1, 6);
    std::copy(forbidden.sample(1).begin(), forbidden.sample(1).end(),
              bad.sample(0).begin());
    const auto clean = testutil::random_images(1, 1, 1, 6, 33);
    std::copy(clean.sample(0).begin(), clean.sample(0).end(),
              bad.sample(1).begin());
    try {
      remote.submit(id, bad);
      FAIL("expected BoundaryViolationError");
    } catch (const BoundaryViolationError& e) {
      REQUIRE(e.rejected_ids.size() == 1);
      CHECK(e.rejected_ids[0] == content_digest(forbidden, 1));
    }

    CHECK_THROWS_AS(remote.finalize(id), ProtocolError);   // still empty
    CHECK_THROWS_AS(remote.finalize(777777), ProtocolError);
  }
  server.stop();
}

TEST_CASE("finalize responses carry only integer labels", "[transport]") {
  // information-boundary check at the wire level: walk the raw JSON reply
  OracleService svc = make_service(910, nullptr);
  OracleServer server(svc, 0);
  server.start();
  {
    TcpOracle remote("127.0.0.1", server.port());
    (void)remote;
  }

  // speak the protocol by hand to inspect the raw reply
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(server.port()));
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);

  wire::send_message(fd, {{"op", "open"}});
  nlohmann::json reply;
  REQUIRE(wire::recv_message(fd, reply));
  const auto session = reply.at("session").get<std::uint64_t>();

  const auto x = testutil::random_images(5, 1, 1, 6, 34);
  nlohmann::json submit = wire::encode_batch(x);
  submit["op"] = "submit";
  submit["session"] = session;
  wire::send_message(fd, submit);
  REQUIRE(wire::recv_message(fd, reply));
  CHECK(reply.at("accepted").get<int>() == 5);

  wire::send_message(fd, {{"op", "finalize"}, {"session", session}});
  REQUIRE(wire::recv_message(fd, reply));
  REQUIRE(reply.contains("labels"));
  CHECK(reply.size() == 1);  // nothing but the labels field
  for (const auto& v : reply.at("labels")) {
    CHECK(v.is_number_integer());  // no per-class reals anywhere
  }

  SECTION("unknown ops get a protocol error reply") {
    wire::send_message(fd, {{"op", "gradients_please"}});
    REQUIRE(wire::recv_message(fd, reply));
    CHECK(reply.contains("error"));
    CHECK(reply.at("category") == "protocol");
  }
  ::close(fd);
  server.stop();
}

TEST_CASE("concurrent sessions do not interfere", "[transport]") {
  OracleService svc = make_service(920, nullptr);
  OracleServer server(svc, 0);
  server.start();
  const auto xa = testutil::random_images(9, 1, 1, 6, 35);
  const auto xb = testutil::random_images(9, 1, 1, 6, 36);

  std::vector<int> la, lb;
  std::thread ta([&] {
    TcpOracle c("127.0.0.1", server.port());
    la = c.query_dataset(UnlabeledDataset::from_images(xa), 3);
  });
  std::thread tb([&] {
    TcpOracle c("127.0.0.1", server.port());
    lb = c.query_dataset(UnlabeledDataset::from_images(xb), 4);
  });
  ta.join();
  tb.join();

  OracleService ref = make_service(920, nullptr);
  InProcOracle local(ref);
  CHECK(la == local.query_dataset(UnlabeledDataset::from_images(xa)));
  CHECK(lb == local.query_dataset(UnlabeledDataset::from_images(xb)));
  server.stop();
}

TEST_CASE("oracle endpoint parsing", "[transport]") {
  CHECK(OracleEndpoint::parse("inproc").inproc);
  const auto e = OracleEndpoint::parse("tcp://localhost:9000");
  CHECK_FALSE(e.inproc);
  CHECK(e.host == "localhost");
  CHECK(e.port == 9000);
  CHECK_THROWS_AS(OracleEndpoint::parse("udp://x:1"), ConfigError);
  CHECK_THROWS_AS(OracleEndpoint::parse("tcp://nohost"), ConfigError);
  CHECK_THROWS_AS(OracleEndpoint::parse("tcp://h:notaport"), ConfigError);
}
