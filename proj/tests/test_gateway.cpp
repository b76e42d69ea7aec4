#include <catch2/catch_amalgamated.hpp>

#include <atomic>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "logreasoner/gateway.hpp"
#include "test_helpers.hpp"

using namespace logreasoner;
using nlohmann::json;

namespace {

GatewayConfig quick_config(int max_retries = 2, int max_in_flight = 4) {
    GatewayConfig cfg;
    cfg.base_url = "http://127.0.0.1:1";  // unused by the mock transport
    cfg.model = "test-model";
    cfg.max_retries = max_retries;
    cfg.backoff_base_ms = 1;
    cfg.max_in_flight = max_in_flight;
    cfg.timeout_ms = 500;
    return cfg;
}

Gateway mock_gateway(const json& script, int max_retries = 2, int max_in_flight = 4,
                     std::shared_ptr<MockTransport>* out_transport = nullptr) {
    auto transport = std::make_shared<MockTransport>(script);
    if (out_transport) *out_transport = transport;
    return Gateway({{"ep", quick_config(max_retries, max_in_flight)}}, transport);
}

// Local OpenAI-shaped server for exercising the real HTTP transport.
struct LocalServer {
    httplib::Server server;
    std::thread thread;
    int port = 0;

    explicit LocalServer(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
        server.Post("/v1/chat/completions", std::move(handler));
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~LocalServer() {
        server.stop();
        thread.join();
    }
};

}  // namespace

TEST_CASE("mock complete returns scripted text") {
    Gateway gw = mock_gateway({{"tags", {{"t1", {"ok"}}}}});
    Completion c = gw.complete(user_prompt("ep", "hello", 0.0, 64, "t1"));
    CHECK(c.text == "ok");
    CHECK(c.finish == Finish::Stop);
    CHECK(c.attempt_count == 1);
}

TEST_CASE("mock fail twice then succeed consumes three attempts") {
    std::shared_ptr<MockTransport> transport;
    json script = {{"tags",
                    {{"t1", {json{{"fault", "http_503"}}, json{{"fault", "http_503"}}, "ok"}}}}};
    Gateway gw = mock_gateway(script, 3, 4, &transport);
    Completion c = gw.complete(user_prompt("ep", "hello", 0.0, 64, "t1"));
    CHECK(c.finish == Finish::Stop);
    CHECK(c.text == "ok");
    CHECK(c.attempt_count == 3);
    // verified against the mock's own request log
    CHECK(transport->request_log().size() == 3);
}

TEST_CASE("mock always-503 exhausts retries: 1 initial + max_retries attempts") {
    std::shared_ptr<MockTransport> transport;
    Gateway gw = mock_gateway({{"tags", {{"t1", {json{{"fault", "http_503"}}}}}}}, 2, 4, &transport);
    Completion c = gw.complete(user_prompt("ep", "hello", 0.0, 64, "t1"));
    CHECK(c.finish == Finish::Error);
    CHECK(c.attempt_count == 3);
    CHECK(transport->request_log().size() == 3);
}

TEST_CASE("auth faults do not retry") {
    std::shared_ptr<MockTransport> transport;
    Gateway gw = mock_gateway({{"tags", {{"t1", {json{{"fault", "http_401"}}}}}}}, 5, 4, &transport);
    Completion c = gw.complete(user_prompt("ep", "hello", 0.0, 64, "t1"));
    CHECK(c.finish == Finish::Error);
    CHECK(c.attempt_count == 1);
}

TEST_CASE("request validation") {
    Gateway gw = mock_gateway({{"default", {"ok"}}});
    PromptRequest bad_role;
    bad_role.endpoint_id = "ep";
    bad_role.messages = {{"assistant", "hi"}};
    bad_role.request_tag = "t";
    CHECK_THROWS_AS(gw.complete(bad_role), std::invalid_argument);
    CHECK_THROWS_AS(gw.complete(user_prompt("ep", "x", 3.0, 64, "t")), std::invalid_argument);
    CHECK_THROWS_AS(gw.complete(user_prompt("missing", "x", 0.0, 64, "t")), GatewayError);
}

TEST_CASE("empty batch") {
    Gateway gw = mock_gateway({{"default", {"ok"}}});
    CHECK(gw.complete_batch({}).empty());
}

TEST_CASE("batch output is index-aligned whatever the completion order") {
    json tags = json::object();
    std::vector<PromptRequest> reqs;
    for (int i = 0; i < 10; ++i) {
        std::string tag = "t" + std::to_string(i);
        tags[tag] = {"answer-" + std::to_string(i)};
        reqs.push_back(user_prompt("ep", "q", 0.0, 64, tag));
    }
    Gateway gw = mock_gateway({{"latency_ms", 3}, {"tags", tags}}, 2, 3);
    auto results = gw.complete_batch(reqs);
    REQUIRE(results.size() == 10);
    for (int i = 0; i < 10; ++i) CHECK(results[i].text == "answer-" + std::to_string(i));
}

TEST_CASE("batch with one failing request yields exactly one error at that index") {
    json tags = json::object();
    std::vector<PromptRequest> reqs;
    for (int i = 0; i < 5; ++i) {
        std::string tag = "t" + std::to_string(i);
        if (i == 3) tags[tag] = {json{{"fault", "http_503"}}};
        else tags[tag] = {"ok"};
        reqs.push_back(user_prompt("ep", "q", 0.0, 64, tag));
    }
    Gateway gw = mock_gateway({{"tags", tags}}, 1);
    auto results = gw.complete_batch(reqs);
    for (int i = 0; i < 5; ++i) {
        if (i == 3) CHECK(results[i].finish == Finish::Error);
        else CHECK(results[i].finish == Finish::Stop);
    }
}

TEST_CASE("peak in-flight stays within max_in_flight for a batch of 100") {
    std::shared_ptr<MockTransport> transport;
    Gateway gw = mock_gateway({{"latency_ms", 2}, {"default", {"ok"}}}, 0, 3, &transport);
    std::vector<PromptRequest> reqs;
    for (int i = 0; i < 100; ++i)
        reqs.push_back(user_prompt("ep", "q", 0.0, 64, "t" + std::to_string(i)));
    auto results = gw.complete_batch(reqs);
    CHECK(results.size() == 100);
    CHECK(transport->peak_in_flight() <= 3);
    CHECK(transport->request_log().size() == 100);
}

TEST_CASE("retry accounting: attempt_count <= max_retries + 1") {
    for (int retries : {0, 1, 3}) {
        Gateway gw = mock_gateway({{"tags", {{"t", {json{{"fault", "timeout"}}}}}}}, retries);
        Completion c = gw.complete(user_prompt("ep", "q", 0.0, 64, "t"));
        CHECK(c.attempt_count == retries + 1);
    }
}

TEST_CASE("mock embeddings: scripted passthrough, shape, determinism") {
    json script = {{"embedding_dim", 4}, {"embeddings", {{"a", {0.0, 1.0, 0.0}}}}};
    Gateway gw = mock_gateway(script);

    auto one = gw.embed("ep", {"a"});
    REQUIRE(one.size() == 1);
    CHECK(one[0] == std::vector<double>{0.0, 1.0, 0.0});

    // unscripted texts get derived vectors of the configured dimension
    auto two = gw.embed("ep", {"b", "c"});
    REQUIRE(two.size() == 2);
    CHECK(two[0].size() == 4);
    CHECK(two[1].size() == 4);

    auto dup = gw.embed("ep", {"x", "x"});
    CHECK(dup[0] == dup[1]);

    CHECK_THROWS_AS(gw.embed("ep", {""}), GatewayError);
}

TEST_CASE("http transport round-trips an OpenAI-shaped endpoint") {
    std::atomic<int> hits{0};
    LocalServer server([&](const httplib::Request& req, httplib::Response& res) {
        ++hits;
        json body = json::parse(req.body);
        REQUIRE(body.at("model") == "real-model");
        REQUIRE(body.at("messages").size() == 1);
        json reply = {{"choices",
                       {{{"message", {{"content", "echo: " + body["messages"][0]["content"].get<std::string>()}},
                         {"finish_reason", "stop"}}}}}};
        res.set_content(reply.dump(), "application/json");
    });

    GatewayConfig cfg;
    cfg.base_url = "http://127.0.0.1:" + std::to_string(server.port);
    cfg.model = "real-model";
    cfg.max_retries = 1;
    cfg.backoff_base_ms = 1;
    cfg.timeout_ms = 2000;
    Gateway gw({{"ep", cfg}}, std::make_shared<HttpTransport>());

    Completion c = gw.complete(user_prompt("ep", "ping", 0.0, 32, "t"));
    CHECK(c.finish == Finish::Stop);
    CHECK(c.text == "echo: ping");
    CHECK(hits == 1);
}

TEST_CASE("http transport retries 503 and survives malformed JSON") {
    std::atomic<int> hits{0};
    LocalServer server([&](const httplib::Request&, httplib::Response& res) {
        int n = ++hits;
        if (n == 1) {
            res.status = 503;
            return;
        }
        if (n == 2) {
            res.set_content("this is not json{", "application/json");
            return;
        }
        json reply = {{"choices",
                       {{{"message", {{"content", "fine"}}}, {"finish_reason", "stop"}}}}};
        res.set_content(reply.dump(), "application/json");
    });

    GatewayConfig cfg;
    cfg.base_url = "http://127.0.0.1:" + std::to_string(server.port);
    cfg.model = "m";
    cfg.max_retries = 3;
    cfg.backoff_base_ms = 1;
    cfg.timeout_ms = 2000;
    Gateway gw({{"ep", cfg}}, std::make_shared<HttpTransport>());

    Completion c = gw.complete(user_prompt("ep", "q", 0.0, 32, "t"));
    CHECK(c.finish == Finish::Stop);
    CHECK(c.text == "fine");
    CHECK(c.attempt_count == 3);
}

TEST_CASE("missing auth environment variable is a fatal error") {
    GatewayConfig cfg;
    cfg.base_url = "http://127.0.0.1:9";  // never reached
    cfg.model = "m";
    cfg.auth_env = "LOGREASONER_TEST_TOKEN_THAT_IS_NOT_SET";
    cfg.max_retries = 3;
    cfg.backoff_base_ms = 1;
    Gateway gw({{"ep", cfg}}, std::make_shared<HttpTransport>());
    Completion c = gw.complete(user_prompt("ep", "q", 0.0, 32, "t"));
    CHECK(c.finish == Finish::Error);
    CHECK(c.attempt_count == 1);  // no retries on auth failure
}
