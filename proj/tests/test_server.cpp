#include <catch2/catch_amalgamated.hpp>

#include <thread>

#include "client.hpp"
#include "helpers.hpp"
#include "prefbench/server.hpp"

using namespace prefbench;

namespace {

struct LiveServer {
  ElicitationService service;
  httplib::Server server;
  std::thread thread;
  int port = 0;

  explicit LiveServer(ServiceConfig cfg)
      : service(std::move(cfg), testing::load_map("delivery"), testing::load_map("practice"),
                Json::parse(testing::read_file("content/teaching.json"))) {
    install_routes(server, service);
    port = server.bind_to_any_port("127.0.0.1");
    thread = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }

  ~LiveServer() {
    server.stop();
    thread.join();
  }

  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(30, 0);
    return c;
  }
};

httplib::Headers bearer(const std::string& token) {
  return {{"Authorization", "Bearer " + token}};
}

Json body_of(const httplib::Result& r) {
  REQUIRE(r);
  return Json::parse(r->body);
}

}  // namespace

TEST_CASE("health and session creation") {
  LiveServer live{ServiceConfig{}};
  auto cli = live.client();
  auto h = cli.Get("/healthz");
  REQUIRE(h);
  CHECK(h->status == 200);
  CHECK(body_of(h).at("status") == "ok");

  auto created = cli.Post("/sessions", R"({"condition":"question-regret"})", "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  const Json c = body_of(created);
  CHECK(c.at("condition") == "question-regret");
  CHECK(c.at("token").get<std::string>().size() == 32);

  CHECK(cli.Post("/sessions", R"({"condition":"question-blue"})", "application/json")->status == 404);
  CHECK(cli.Post("/sessions", R"({})", "application/json")->status == 400);
  CHECK(cli.Post("/sessions", "not json", "application/json")->status == 400);
  const auto err = cli.Post("/sessions", "{", "application/json");
  CHECK(body_of(err).contains("error"));
}

TEST_CASE("bearer tokens guard session routes") {
  LiveServer live{ServiceConfig{}};
  auto cli = live.client();
  const Json c = body_of(cli.Post("/sessions", R"({"condition":"trained-control"})", "application/json"));
  const std::string id = c.at("session_id");
  const std::string token = c.at("token");
  CHECK(cli.Get("/sessions/" + id + "/next")->status == 401);
  CHECK(cli.Get("/sessions/" + id + "/next", bearer("nope"))->status == 401);
  CHECK(cli.Get("/sessions/" + id, bearer("nope"))->status == 401);
  CHECK(cli.Post("/sessions/" + id + "/responses", bearer("nope"), "{}", "application/json")->status ==
        401);
  CHECK(cli.Get("/sessions/s999999/next", bearer(token))->status == 404);
  CHECK(cli.Get("/sessions/" + id + "/next", bearer(token))->status == 200);
  CHECK(body_of(cli.Get("/sessions/" + id, bearer(token))).at("stage") == "domain_teaching");
}

TEST_CASE("full session over HTTP") {
  LiveServer live{ServiceConfig{}};
  auto cli = live.client();
  const GridMap delivery = testing::load_map("delivery");
  const GridMap practice = testing::load_map("practice");
  const LinearReward gt = LinearReward::ground_truth();
  const ValueTable vt = value_iteration(delivery, gt);
  const ValueTable vt_practice = value_iteration(practice, gt);

  const Json c = body_of(cli.Post("/sessions", R"({"condition":"trained-regret"})", "application/json"));
  const std::string id = c.at("session_id");
  const auto auth = bearer(c.at("token"));
  std::string last_item;
  int pairs = 0;
  for (;;) {
    const Json p = body_of(cli.Get("/sessions/" + id + "/next", auth));
    if (p.at("kind") == "survey") {
      CHECK(p.at("questions").size() == 6);
      CHECK_FALSE(p.at("likert").is_null());
      break;
    }
    Json body;
    if (p.at("kind") == "teaching") {
      body = {{"item_id", p.at("item_id")}};
    } else {
      ++pairs;
      const bool on_practice = p.at("map") == "practice";
      const Choice ch = testing::model_choice(p, on_practice ? practice : delivery,
                                              on_practice ? vt_practice : vt, ModelKind::kRegret);
      body = {{"pair_id", p.at("pair_id")}, {"choice", std::string(to_string(ch))}};
    }
    const auto r = cli.Post("/sessions/" + id + "/responses", auth, body.dump(), "application/json");
    REQUIRE(r->status == 200);
    last_item = body.contains("item_id") ? body.at("item_id") : body.at("pair_id");
    // Resubmitting the same item is a conflict.
    if (pairs == 1 && p.at("kind") == "pair") {
      CHECK(cli.Post("/sessions/" + id + "/responses", auth, body.dump(), "application/json")->status ==
            409);
    }
  }
  CHECK(pairs == 68);
  CHECK(cli.Post("/sessions/" + id + "/responses", auth,
                 Json{{"pair_id", last_item}, {"choice", "first"}}.dump(), "application/json")
            ->status == 409);
  CHECK(cli.Post("/sessions/" + id + "/survey", auth, R"({"answers":3})", "application/json")->status ==
        400);

  const auto s = cli.Post("/sessions/" + id + "/survey", auth,
                          testing::survey_body(Experiment::kTrained, 6).dump(), "application/json");
  REQUIRE(s->status == 200);
  const Json scored = body_of(s);
  CHECK(scored.at("score") == 6.0);
  CHECK(scored.at("kept") == true);
  CHECK(body_of(cli.Get("/sessions/" + id + "/next", auth)).contains("error"));
  CHECK(cli.Get("/sessions/" + id + "/next", auth)->status == 409);

  const auto ex = cli.Get("/conditions/trained-regret/export");
  REQUIRE(ex->status == 200);
  CHECK(ex->get_header_value("Content-Type") == "application/x-ndjson");
  const PreferenceDataset d = read_dataset(ex->body, delivery);
  CHECK(d.size() > 30);
  for (const auto& sample : d.samples) {
    CHECK(sample.annotator_id == id);
    CHECK(sample.strict());
  }
  const auto with_same = cli.Get("/conditions/trained-regret/export?include_same=true");
  CHECK(read_dataset(with_same->body, delivery).size() >= d.size());
  const Json side = body_of(cli.Get("/conditions/trained-regret/sidecar"));
  CHECK(side.at("condition") == "trained-regret");
  CHECK(cli.Get("/conditions/trained-control/export")->status == 404);
  CHECK(cli.Get("/conditions/nope/export")->status == 404);
}

TEST_CASE("concurrent HTTP clients") {
  LiveServer live{ServiceConfig{}};
  std::vector<std::thread> workers;
  std::atomic<int> ok{0};
  for (int i = 0; i < 4; ++i) {
    workers.emplace_back([&] {
      auto cli = live.client();
      const Json c =
          Json::parse(cli.Post("/sessions", R"({"condition":"question-control"})", "application/json")->body);
      const auto auth = bearer(c.at("token"));
      const std::string id = c.at("session_id");
      for (;;) {
        const Json p = Json::parse(cli.Get("/sessions/" + id + "/next", auth)->body);
        if (p.at("kind") == "survey") break;
        const Json body = p.at("kind") == "teaching"
                              ? Json{{"item_id", p.at("item_id")}}
                              : Json{{"pair_id", p.at("pair_id")}, {"choice", "cant_tell"}};
        if (cli.Post("/sessions/" + id + "/responses", auth, body.dump(), "application/json")->status != 200) {
          return;
        }
      }
      ++ok;
    });
  }
  for (auto& t : workers) t.join();
  CHECK(ok == 4);
}
