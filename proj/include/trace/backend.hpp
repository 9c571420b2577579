#pragma once

#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "trace/templates.hpp"

namespace trace {

class BackendUnreachable : public TraceError {
public:
    explicit BackendUnreachable(const std::string& what) : TraceError(what) {}
};

class MalformedBackendReply : public TraceError {
public:
    explicit MalformedBackendReply(const std::string& what) : TraceError(what) {}
};

class InvalidRequest : public TraceError {
public:
    explicit InvalidRequest(const std::string& what) : TraceError(what) {}
};

class NoJsonFound : public TraceError {
public:
    explicit NoJsonFound(const std::string& what) : TraceError(what) {}
};

class InvalidJson : public TraceError {
public:
    explicit InvalidJson(const std::string& what) : TraceError(what) {}
};

struct ChatRequest {
    TemplateId template_id = TemplateId::Reasoner;
    std::string rendered_prompt;
    int max_output_tokens = 1024;
    bool want_logprobs = true;
    double decode_temperature = 0.0;
};

/// token_logprobs absent means the backend could not supply log-probabilities;
/// callers treat uncertainty as maximal in that case.
struct ChatResponse {
    std::string text;
    std::optional<std::vector<double>> token_logprobs;
    std::string backend_name;
    int latency_ms = 0;
};

/// Extract the first balanced top-level JSON object from agent output,
/// tolerating surrounding prose and code fences. A balanced-but-invalid
/// candidate is skipped in favor of a later valid one.
inline json extract_json(const std::string& text) {
    bool saw_candidate = false;
    for (size_t i = 0; i < text.size(); ++i) {
        if (text[i] != '{') continue;
        int depth = 0;
        bool in_str = false, esc = false;
        size_t end = std::string::npos;
        for (size_t j = i; j < text.size(); ++j) {
            char c = text[j];
            if (in_str) {
                if (esc) esc = false;
                else if (c == '\\') esc = true;
                else if (c == '"') in_str = false;
                continue;
            }
            if (c == '"') {
                in_str = true;
            } else if (c == '{') {
                ++depth;
            } else if (c == '}') {
                if (--depth == 0) {
                    end = j;
                    break;
                }
            }
        }
        if (end == std::string::npos) continue;
        saw_candidate = true;
        try {
            return json::parse(text.substr(i, end - i + 1));
        } catch (const std::exception&) {
            // fall through to the next candidate
        }
    }
    if (saw_candidate) throw InvalidJson("no parseable JSON object in reply");
    throw NoJsonFound("no JSON object in reply");
}

/// Chat-completion abstraction shared by every agent role. Implementations
/// must be safe to call from concurrent trajectory workers; per-call state is
/// confined to the call. Call counts per template are kept for run manifests
/// and for the phase-separation assertions.
class ChatBackend {
public:
    virtual ~ChatBackend() = default;

    ChatResponse complete(const ChatRequest& request) {
        if (request.rendered_prompt.empty()) throw InvalidRequest("empty prompt");
        if (request.max_output_tokens <= 0) throw InvalidRequest("max_output_tokens must be > 0");
        {
            std::lock_guard lock(counts_mutex_);
            ++call_counts_[request.template_id];
        }
        return do_complete(request);
    }

    std::map<TemplateId, long long> call_counts() const {
        std::lock_guard lock(counts_mutex_);
        return call_counts_;
    }

    long long calls(TemplateId id) const {
        std::lock_guard lock(counts_mutex_);
        auto it = call_counts_.find(id);
        return it == call_counts_.end() ? 0 : it->second;
    }

    virtual std::string name() const = 0;

protected:
    virtual ChatResponse do_complete(const ChatRequest& request) = 0;

private:
    mutable std::mutex counts_mutex_;
    std::map<TemplateId, long long> call_counts_;
};

// ---------------------------------------------------------------------------
// Scripted mock backend
// ---------------------------------------------------------------------------

struct MockEntry {
    std::optional<TemplateId> template_filter;  // absent = any template
    std::string prompt_contains;                // empty = any prompt
    std::string response_text;
    std::optional<std::vector<double>> logprobs;  // unset = constant -0.05/token
    bool no_logprobs = false;  // entry deliberately withholds logprobs

    bool matches(const ChatRequest& req) const {
        if (template_filter && *template_filter != req.template_id) return false;
        return prompt_contains.empty() ||
               req.rendered_prompt.find(prompt_contains) != std::string::npos;
    }
};

struct MockScript {
    std::vector<MockEntry> entries;  // first-hit matching
    MockEntry default_response;

    static MockScript from_records(const std::vector<json>& records) {
        MockScript script;
        bool have_default = false;
        for (const auto& j : records) {
            MockEntry e;
            if (j.contains("template")) {
                auto id = template_id_from_string(j.at("template").get<std::string>());
                if (!id) throw TraceError("mock script: unknown template " + j.at("template").dump());
                e.template_filter = id;
            }
            e.prompt_contains = j.value("prompt_contains", std::string{});
            if (j.contains("response_json")) e.response_text = j.at("response_json").dump();
            else e.response_text = j.value("response", std::string{});
            if (j.contains("logprobs")) {
                if (j.at("logprobs").is_null()) e.no_logprobs = true;
                else e.logprobs = j.at("logprobs").get<std::vector<double>>();
            }
            if (j.value("default", false)) {
                script.default_response = std::move(e);
                have_default = true;
            } else {
                script.entries.push_back(std::move(e));
            }
        }
        if (!have_default) throw TraceError("mock script: no default entry");
        return script;
    }

    static MockScript from_file(const std::filesystem::path& path) {
        return from_records(read_jsonl(path));
    }
};

/// Deterministic scripted backend for offline runs and tests: identical
/// request sequences yield identical response sequences.
class MockBackend : public ChatBackend {
public:
    explicit MockBackend(MockScript script) : script_(std::move(script)) {}

    std::string name() const override { return "mock"; }

protected:
    ChatResponse do_complete(const ChatRequest& request) override {
        const MockEntry* hit = &script_.default_response;
        for (const auto& e : script_.entries) {
            if (e.matches(request)) {
                hit = &e;
                break;
            }
        }
        ChatResponse resp;
        resp.text = hit->response_text;
        resp.backend_name = name();
        if (!request.want_logprobs || hit->no_logprobs) return resp;
        if (hit->logprobs) {
            resp.token_logprobs = hit->logprobs;
        } else {
            // confident default keeps the Auditor quiescent unless a fixture
            // says otherwise
            int n = std::max(1, count_words(resp.text));
            resp.token_logprobs = std::vector<double>(static_cast<size_t>(n), -0.05);
        }
        return resp;
    }

private:
    MockScript script_;
};

}  // namespace trace
