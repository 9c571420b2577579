#pragma once

#include <cstdlib>

#include <httplib.h>

#include "trace/backend.hpp"

namespace trace {

struct HttpBackendConfig {
    std::string endpoint = "http://127.0.0.1:8000";  // scheme://host[:port][/base-path]
    std::string model = "local-model";
    std::string api_key_env = "TRACE_API_KEY";
    int timeout_ms = 30000;
    int max_attempts = 3;  // total network attempts per call
    int backoff_ms = 200;
};

/// OpenAI-style chat-completions client with per-token log-probabilities.
/// One named wire encoding behind the ChatBackend interface, not the only
/// possible one.
class HttpBackend : public ChatBackend {
public:
    explicit HttpBackend(HttpBackendConfig cfg) : cfg_(std::move(cfg)) {
        parse_endpoint(cfg_.endpoint, host_port_, base_path_);
        if (const char* key = std::getenv(cfg_.api_key_env.c_str())) api_key_ = key;
    }

    std::string name() const override { return "http:" + cfg_.model; }

protected:
    ChatResponse do_complete(const ChatRequest& request) override {
        json body;
        body["model"] = cfg_.model;
        body["messages"] = json::array({json{{"role", "user"}, {"content", request.rendered_prompt}}});
        body["temperature"] = request.decode_temperature;
        body["max_tokens"] = request.max_output_tokens;
        if (request.want_logprobs) body["logprobs"] = true;

        std::string payload = body.dump();
        std::string last_error;
        for (int attempt = 1; attempt <= cfg_.max_attempts; ++attempt) {
            if (attempt > 1)
                std::this_thread::sleep_for(
                    std::chrono::milliseconds(cfg_.backoff_ms * (1 << (attempt - 2))));
            auto started = std::chrono::steady_clock::now();
            httplib::Client client(host_port_);
            client.set_connection_timeout(0, cfg_.timeout_ms * 1000LL);
            client.set_read_timeout(cfg_.timeout_ms / 1000, (cfg_.timeout_ms % 1000) * 1000);
            httplib::Headers headers;
            if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
            auto res = client.Post(base_path_ + "/chat/completions", headers, payload,
                                   "application/json");
            if (!res) {
                last_error = "connection failed: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status == 429 || res->status >= 500) {
                last_error = "status " + std::to_string(res->status);
                continue;
            }
            if (res->status != 200)
                throw MalformedBackendReply("backend status " + std::to_string(res->status) + ": " +
                                            res->body);
            auto latency = std::chrono::duration_cast<std::chrono::milliseconds>(
                               std::chrono::steady_clock::now() - started)
                               .count();
            return decode_reply(res->body, static_cast<int>(latency));
        }
        throw BackendUnreachable("backend unreachable after " + std::to_string(cfg_.max_attempts) +
                                 " attempts: " + last_error);
    }

private:
    ChatResponse decode_reply(const std::string& body, int latency_ms) const {
        json j;
        try {
            j = json::parse(body);
        } catch (const std::exception& e) {
            throw MalformedBackendReply(std::string("invalid JSON from backend: ") + e.what());
        }
        if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty())
            throw MalformedBackendReply("backend reply has no choices");
        const json& choice = j["choices"][0];

        ChatResponse resp;
        resp.backend_name = name();
        resp.latency_ms = latency_ms;
        if (choice.contains("message") && choice["message"].contains("content") &&
            choice["message"]["content"].is_string())
            resp.text = choice["message"]["content"].get<std::string>();
        else if (choice.contains("text") && choice["text"].is_string())
            resp.text = choice["text"].get<std::string>();
        else
            throw MalformedBackendReply("backend reply has no message content");

        if (choice.contains("logprobs") && !choice["logprobs"].is_null()) {
            const json& lp = choice["logprobs"];
            std::vector<double> values;
            if (lp.contains("content") && lp["content"].is_array()) {
                for (const auto& tok : lp["content"])
                    if (tok.contains("logprob") && tok["logprob"].is_number())
                        values.push_back(std::min(0.0, tok["logprob"].get<double>()));
            } else if (lp.contains("token_logprobs") && lp["token_logprobs"].is_array()) {
                for (const auto& v : lp["token_logprobs"])
                    if (v.is_number()) values.push_back(std::min(0.0, v.get<double>()));
            }
            if (!values.empty()) resp.token_logprobs = std::move(values);
        }
        return resp;
    }

    static void parse_endpoint(const std::string& endpoint, std::string& host_port,
                               std::string& base_path) {
        std::string rest = endpoint;
        std::string scheme = "http";
        if (auto pos = rest.find("://"); pos != std::string::npos) {
            scheme = rest.substr(0, pos);
            rest = rest.substr(pos + 3);
        }
        if (scheme != "http")
            throw TraceError("unsupported endpoint scheme '" + scheme + "' (this build is http-only)");
        auto slash = rest.find('/');
        std::string authority = slash == std::string::npos ? rest : rest.substr(0, slash);
        base_path = slash == std::string::npos ? "" : rest.substr(slash);
        while (!base_path.empty() && base_path.back() == '/') base_path.pop_back();
        host_port = "http://" + authority;
    }

    HttpBackendConfig cfg_;
    std::string host_port_;
    std::string base_path_;
    std::string api_key_;
};

}  // namespace trace
