#pragma once
// Uniform client for OpenAI-compatible chat-completion and embedding
// endpoints: retries with exponential backoff, bounded batch concurrency,
// and a scripted in-process mock transport for offline runs and tests.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "logreasoner/util.hpp"

namespace logreasoner {

struct GatewayError : std::runtime_error {
    explicit GatewayError(const std::string& what) : std::runtime_error(what) {}
};

struct ChatMessage {
    std::string role;  // system | user | assistant
    std::string content;
};

struct PromptRequest {
    std::string endpoint_id;
    std::vector<ChatMessage> messages;
    double temperature = 0.0;
    int max_tokens = 1024;
    std::string request_tag;  // stable id for logging and mock scripting
};

enum class Finish { Stop, Length, Error };

struct Completion {
    std::string text;
    Finish finish = Finish::Error;
    int attempt_count = 0;
    std::string note;  // error detail when finish == Error
};

struct GatewayConfig {
    std::string base_url;           // scheme://host[:port]
    std::string path_prefix = "/v1";
    std::string model;
    std::string auth_env;           // env var holding the bearer token; empty = no auth
    int max_retries = 3;
    int backoff_base_ms = 200;
    int max_in_flight = 4;
    int timeout_ms = 30000;
};

enum class WireStatus { Ok, Retry, Fatal };

struct ChatReply {
    WireStatus status = WireStatus::Fatal;
    std::string text;
    Finish finish = Finish::Error;
    std::string note;
};

struct EmbedReply {
    WireStatus status = WireStatus::Fatal;
    std::vector<std::vector<double>> vectors;
    std::string note;
};

class Transport {
  public:
    virtual ~Transport() = default;
    virtual ChatReply chat(const GatewayConfig& cfg, const PromptRequest& req) = 0;
    virtual EmbedReply embed(const GatewayConfig& cfg, const std::vector<std::string>& texts,
                             const std::string& tag) = 0;
};

// ---------------------------------------------------------------------------
// HTTP transport (OpenAI-compatible wire shapes)

class HttpTransport : public Transport {
  public:
    ChatReply chat(const GatewayConfig& cfg, const PromptRequest& req) override {
        nlohmann::json body;
        body["model"] = cfg.model;
        auto& msgs = body["messages"] = nlohmann::json::array();
        for (const ChatMessage& m : req.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
        body["temperature"] = req.temperature;
        body["max_tokens"] = req.max_tokens;

        std::string resp;
        ChatReply reply;
        if (!post(cfg, cfg.path_prefix + "/chat/completions", body.dump(), resp, reply.status, reply.note))
            return reply;

        try {
            nlohmann::json j = nlohmann::json::parse(resp);
            const auto& choice = j.at("choices").at(0);
            reply.text = choice.at("message").at("content").get<std::string>();
            std::string finish = choice.value("finish_reason", "stop");
            reply.finish = finish == "length" ? Finish::Length : Finish::Stop;
            if (reply.finish == Finish::Stop && reply.text.empty()) {
                reply.status = WireStatus::Retry;
                reply.note = "empty completion";
                return reply;
            }
            reply.status = WireStatus::Ok;
        } catch (const std::exception& e) {
            reply.status = WireStatus::Retry;
            reply.note = std::string("malformed completion response: ") + e.what();
        }
        return reply;
    }

    EmbedReply embed(const GatewayConfig& cfg, const std::vector<std::string>& texts,
                     const std::string&) override {
        nlohmann::json body;
        body["model"] = cfg.model;
        body["input"] = texts;

        std::string resp;
        EmbedReply reply;
        WireStatus status;
        std::string note;
        if (!post(cfg, cfg.path_prefix + "/embeddings", body.dump(), resp, status, note)) {
            reply.status = status;
            reply.note = note;
            return reply;
        }
        try {
            nlohmann::json j = nlohmann::json::parse(resp);
            const auto& data = j.at("data");
            std::vector<std::vector<double>> vectors(texts.size());
            std::size_t filled = 0;
            for (const auto& item : data) {
                std::size_t idx = item.at("index").get<std::size_t>();
                if (idx >= vectors.size()) throw std::runtime_error("embedding index out of range");
                vectors[idx] = item.at("embedding").get<std::vector<double>>();
                ++filled;
            }
            if (filled != texts.size()) throw std::runtime_error("embedding count mismatch");
            reply.vectors = std::move(vectors);
            reply.status = WireStatus::Ok;
        } catch (const std::exception& e) {
            reply.status = WireStatus::Retry;
            reply.note = std::string("malformed embedding response: ") + e.what();
        }
        return reply;
    }

  private:
    // Returns true when a 200 body was produced; otherwise fills status/note.
    bool post(const GatewayConfig& cfg, const std::string& path, const std::string& body,
              std::string& out, WireStatus& status, std::string& note) {
        httplib::Client client(cfg.base_url);
        client.set_connection_timeout(0, cfg.timeout_ms * 1000);
        client.set_read_timeout(cfg.timeout_ms / 1000, (cfg.timeout_ms % 1000) * 1000);
        client.set_write_timeout(cfg.timeout_ms / 1000, (cfg.timeout_ms % 1000) * 1000);

        httplib::Headers headers;
        if (!cfg.auth_env.empty()) {
            const char* token = std::getenv(cfg.auth_env.c_str());
            if (token == nullptr || *token == '\0') {
                status = WireStatus::Fatal;
                note = "auth env var " + cfg.auth_env + " is not set";
                return false;
            }
            headers.emplace("Authorization", std::string("Bearer ") + token);
        }

        auto res = client.Post(path, headers, body, "application/json");
        if (!res) {
            status = WireStatus::Retry;
            note = "transport error: " + httplib::to_string(res.error());
            return false;
        }
        if (res->status == 200) {
            out = res->body;
            return true;
        }
        if (res->status == 401 || res->status == 403) {
            status = WireStatus::Fatal;
            note = "auth failure (" + std::to_string(res->status) + ")";
        } else if (res->status == 429 || res->status >= 500) {
            status = WireStatus::Retry;
            note = "http " + std::to_string(res->status);
        } else {
            status = WireStatus::Fatal;
            note = "http " + std::to_string(res->status);
        }
        return false;
    }
};

// ---------------------------------------------------------------------------
// Scripted mock transport
//
// Script file schema (JSON):
//   {
//     "embedding_dim": 8,
//     "latency_ms": 0,
//     "embeddings": { "some text": [0.0, 1.0, 0.0] },
//     "tags": { "traj:inst-1": ["text", {"text": "..."}, {"fault": "http_503"}] },
//     "default": [ {"text": "<answer>normal</answer>"} ]
//   }
// Entries under a tag are consumed in order; the last entry is sticky.
// Faults: http_503, http_429, http_401, timeout, malformed.
// Texts without a scripted embedding get a deterministic pseudo-random
// vector derived from the text hash, so offline runs stay reproducible.

class MockTransport : public Transport {
  public:
    explicit MockTransport(const nlohmann::json& script) { load(script); }

    static std::shared_ptr<MockTransport> from_file(const std::filesystem::path& path) {
        nlohmann::json j = nlohmann::json::parse(read_text_file(path));
        return std::make_shared<MockTransport>(j);
    }

    ChatReply chat(const GatewayConfig&, const PromptRequest& req) override {
        Entry entry = next_entry(req.request_tag);
        InFlightGuard guard(*this, req.request_tag);
        if (latency_ms_ > 0) std::this_thread::sleep_for(std::chrono::milliseconds(latency_ms_));

        ChatReply reply;
        if (entry.fault.empty()) {
            reply.status = WireStatus::Ok;
            reply.finish = Finish::Stop;
            reply.text = entry.text;
            return reply;
        }
        if (entry.fault == "http_401") {
            reply.status = WireStatus::Fatal;
            reply.note = "auth failure (401)";
        } else if (entry.fault == "http_503" || entry.fault == "http_429" ||
                   entry.fault == "timeout" || entry.fault == "malformed") {
            reply.status = WireStatus::Retry;
            reply.note = "mock fault: " + entry.fault;
        } else {
            reply.status = WireStatus::Fatal;
            reply.note = "unknown mock fault: " + entry.fault;
        }
        return reply;
    }

    EmbedReply embed(const GatewayConfig&, const std::vector<std::string>& texts,
                     const std::string& tag) override {
        InFlightGuard guard(*this, tag);
        EmbedReply reply;
        reply.status = WireStatus::Ok;
        reply.vectors.reserve(texts.size());
        for (const std::string& t : texts) {
            auto it = embeddings_.find(t);
            if (it != embeddings_.end()) {
                reply.vectors.push_back(it->second);
            } else {
                reply.vectors.push_back(derived_embedding(t));
            }
        }
        return reply;
    }

    int peak_in_flight() const { return peak_.load(); }

    std::vector<std::string> request_log() const {
        std::lock_guard<std::mutex> lock(mutex_);
        return log_;
    }

  private:
    struct Entry {
        std::string text;
        std::string fault;  // empty = success
    };

    struct InFlightGuard {
        InFlightGuard(MockTransport& t, const std::string& tag) : transport(t) {
            int now = ++transport.in_flight_;
            int peak = transport.peak_.load();
            while (now > peak && !transport.peak_.compare_exchange_weak(peak, now)) {
            }
            std::lock_guard<std::mutex> lock(transport.mutex_);
            transport.log_.push_back(tag);
        }
        ~InFlightGuard() { --transport.in_flight_; }
        MockTransport& transport;
    };

    void load(const nlohmann::json& script) {
        embedding_dim_ = script.value("embedding_dim", 8);
        latency_ms_ = script.value("latency_ms", 0);
        if (script.contains("embeddings"))
            for (const auto& [text, vec] : script.at("embeddings").items())
                embeddings_[text] = vec.get<std::vector<double>>();
        if (script.contains("tags"))
            for (const auto& [tag, entries] : script.at("tags").items())
                queues_[tag] = parse_entries(entries);
        if (script.contains("default")) default_queue_ = parse_entries(script.at("default"));
    }

    static std::deque<Entry> parse_entries(const nlohmann::json& list) {
        std::deque<Entry> queue;
        for (const auto& item : list) {
            Entry e;
            if (item.is_string()) {
                e.text = item.get<std::string>();
            } else {
                if (item.contains("fault")) e.fault = item.at("fault").get<std::string>();
                if (item.contains("text")) e.text = item.at("text").get<std::string>();
            }
            queue.push_back(std::move(e));
        }
        if (queue.empty()) queue.push_back(Entry{"", "no script entries for tag"});
        return queue;
    }

    Entry next_entry(const std::string& tag) {
        std::lock_guard<std::mutex> lock(mutex_);
        auto it = queues_.find(tag);
        std::deque<Entry>* queue = nullptr;
        if (it != queues_.end()) {
            queue = &it->second;
        } else if (!default_queue_.empty()) {
            queue = &default_queue_;
        } else {
            return Entry{"", "no script entry for tag '" + tag + "'"};
        }
        Entry entry = queue->front();
        if (queue->size() > 1) queue->pop_front();  // last entry is sticky
        return entry;
    }

    std::vector<double> derived_embedding(const std::string& text) const {
        Rng rng(fnv1a64(text));
        std::vector<double> v(static_cast<std::size_t>(embedding_dim_));
        double norm_sq = 0.0;
        for (double& x : v) {
            x = rng.unit() * 2.0 - 1.0;
            norm_sq += x * x;
        }
        if (norm_sq < 1e-12) v[0] = 1.0;
        return v;
    }

    int embedding_dim_ = 8;
    int latency_ms_ = 0;
    std::map<std::string, std::vector<double>> embeddings_;
    std::map<std::string, std::deque<Entry>> queues_;
    std::deque<Entry> default_queue_;
    mutable std::mutex mutex_;
    std::vector<std::string> log_;
    std::atomic<int> in_flight_{0};
    std::atomic<int> peak_{0};
};

// ---------------------------------------------------------------------------

class Gateway {
  public:
    Gateway(std::map<std::string, GatewayConfig> endpoints, std::shared_ptr<Transport> transport)
        : endpoints_(std::move(endpoints)), transport_(std::move(transport)) {}

    const GatewayConfig& endpoint(const std::string& id) const {
        auto it = endpoints_.find(id);
        if (it == endpoints_.end()) throw GatewayError("endpoint not bound: " + id);
        return it->second;
    }

    Completion complete(const PromptRequest& req) const {
        validate(req);
        const GatewayConfig& cfg = endpoint(req.endpoint_id);
        Completion completion;
        for (int attempt = 1; attempt <= cfg.max_retries + 1; ++attempt) {
            ChatReply reply = transport_->chat(cfg, req);
            completion.attempt_count = attempt;
            if (reply.status == WireStatus::Ok) {
                completion.text = reply.text;
                completion.finish = reply.finish;
                return completion;
            }
            completion.note = reply.note;
            completion.finish = Finish::Error;
            if (reply.status == WireStatus::Fatal || attempt == cfg.max_retries + 1) return completion;
            backoff(cfg, attempt);
        }
        return completion;
    }

    // Output is index-aligned with the input regardless of completion order;
    // at most max_in_flight requests are outstanding at any instant.
    std::vector<Completion> complete_batch(const std::vector<PromptRequest>& reqs) const {
        std::vector<Completion> results(reqs.size());
        if (reqs.empty()) return results;

        int bound = std::numeric_limits<int>::max();
        for (const PromptRequest& r : reqs) bound = std::min(bound, endpoint(r.endpoint_id).max_in_flight);
        std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(bound, 1)), reqs.size());

        std::atomic<std::size_t> cursor{0};
        std::vector<std::thread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (;;) {
                    std::size_t i = cursor.fetch_add(1);
                    if (i >= reqs.size()) return;
                    results[i] = complete(reqs[i]);
                }
            });
        }
        for (std::thread& t : pool) t.join();
        return results;
    }

    // One vector per text, order-aligned. Throws GatewayError after retries.
    std::vector<std::vector<double>> embed(const std::string& endpoint_id,
                                           const std::vector<std::string>& texts,
                                           const std::string& tag = "embed") const {
        const GatewayConfig& cfg = endpoint(endpoint_id);
        std::vector<std::vector<double>> out;
        out.reserve(texts.size());

        constexpr std::size_t kChunk = 256;
        std::size_t chunk_index = 0;
        for (std::size_t begin = 0; begin < texts.size(); begin += kChunk, ++chunk_index) {
            std::size_t end = std::min(begin + kChunk, texts.size());
            std::vector<std::string> chunk(texts.begin() + static_cast<std::ptrdiff_t>(begin),
                                           texts.begin() + static_cast<std::ptrdiff_t>(end));
            for (const std::string& t : chunk)
                if (t.empty()) throw GatewayError("embed: empty input text");

            std::string chunk_tag = tag + ":" + std::to_string(chunk_index);
            EmbedReply reply;
            for (int attempt = 1; attempt <= cfg.max_retries + 1; ++attempt) {
                reply = transport_->embed(cfg, chunk, chunk_tag);
                if (reply.status == WireStatus::Ok) break;
                if (reply.status == WireStatus::Fatal || attempt == cfg.max_retries + 1)
                    throw GatewayError("embed failed: " + reply.note);
                backoff(cfg, attempt);
            }
            for (auto& v : reply.vectors) out.push_back(std::move(v));
        }

        for (const auto& v : out)
            if (v.size() != out.front().size()) throw GatewayError("embed: inconsistent dimensions");
        return out;
    }

  private:
    static void validate(const PromptRequest& req) {
        if (req.messages.empty()) throw std::invalid_argument("prompt request has no messages");
        if (req.messages.back().role != "user")
            throw std::invalid_argument("last prompt message must have role 'user'");
        if (req.temperature < 0.0 || req.temperature > 2.0)
            throw std::invalid_argument("temperature out of [0,2]");
        if (req.max_tokens < 1) throw std::invalid_argument("max_tokens must be positive");
    }

    static void backoff(const GatewayConfig& cfg, int attempt) {
        long ms = static_cast<long>(cfg.backoff_base_ms) * (1L << std::min(attempt - 1, 10));
        std::this_thread::sleep_for(std::chrono::milliseconds(std::min(ms, 10000L)));
    }

    std::map<std::string, GatewayConfig> endpoints_;
    std::shared_ptr<Transport> transport_;
};

// Convenience for a single-user-message request.
inline PromptRequest user_prompt(const std::string& endpoint_id, const std::string& content,
                                 double temperature, int max_tokens, const std::string& tag) {
    PromptRequest req;
    req.endpoint_id = endpoint_id;
    req.messages = {{"user", content}};
    req.temperature = temperature;
    req.max_tokens = max_tokens;
    req.request_tag = tag;
    return req;
}

}  // namespace logreasoner
