#pragma once

#include <regex>

#include "trace/eval.hpp"

namespace trace {

class IdentifierLeak : public TraceError {
public:
    explicit IdentifierLeak(const std::string& what) : TraceError(what) {}
};

/// Regex screen that keeps patient identifiers out of induced rules. The
/// defaults cover the id shapes of the shipped synthetic corpora (stay_0001
/// style) plus long digit runs; real deployments configure corpus-specific
/// patterns.
class IdentifierScreen {
public:
    IdentifierScreen()
        : IdentifierScreen(std::vector<std::string>{R"(stay[_-]?[0-9]+)", R"([0-9]{6,})"}) {}

    explicit IdentifierScreen(const std::vector<std::string>& patterns) {
        for (const auto& p : patterns)
            patterns_.emplace_back(p, std::regex::ECMAScript | std::regex::icase);
    }

    bool leaks(const std::string& text) const {
        for (const auto& re : patterns_)
            if (std::regex_search(text, re)) return true;
        return false;
    }

private:
    std::vector<std::regex> patterns_;
};

/// A prediction miss handed to the Reflector: trajectory so far, what the
/// model said, what actually happened.
struct FailureCase {
    std::string stay_id;
    int t = 0;
    std::string history_text;  // serialized E_1..E_t, newest bundles retained within budget
    Prediction predicted;
    std::vector<std::string> truth;
};

struct ProposedRule {
    std::string error_analysis;
    GlobalRule rule;  // rule_id assigned at admission
};

/// A step fails when recall@5 of its actions against the truth is below 1.
inline bool detect_failure(const std::vector<std::string>& predicted_actions,
                           const std::vector<std::string>& truth,
                           const AliasTable& aliases = AliasTable{}) {
    if (truth.empty()) throw EmptyTruth("detect_failure: empty truth");
    return recall_at_k(predicted_actions, truth, 5, aliases) < 1.0;
}

struct ReflectOutcome {
    std::optional<ProposedRule> proposed;
    std::string decline_reason;  // set when proposed is absent
};

/// Ask the Reflector whether the miss reveals a missing institutional rule.
/// Declines and malformed replies (after one re-ask) yield no proposal and
/// are logged, never fatal.
inline ReflectOutcome reflect(const FailureCase& fc, ChatBackend& backend,
                              const TemplateSet& templates = TemplateSet{},
                              int max_output_tokens = 768) {
    ChatRequest req;
    req.template_id = TemplateId::Reflector;
    req.rendered_prompt = templates.render(
        TemplateId::Reflector,
        {{"patient_history_text", fc.history_text.empty() ? "(none)" : fc.history_text},
         {"ground_truth_action", join(fc.truth, "; ")},
         {"ai_prediction",
          fc.predicted.actions.empty() ? "(no prediction)" : join(fc.predicted.actions, "; ")}});
    req.max_output_tokens = max_output_tokens;
    req.want_logprobs = false;

    json j;
    bool parsed = false;
    for (int attempt = 0; attempt < 2 && !parsed; ++attempt) {
        try {
            j = extract_json(backend.complete(req).text);
            parsed = true;
        } catch (const TraceError&) {
        }
    }
    if (!parsed) return {std::nullopt, "malformed reply"};
    if (!j.contains("proposed_rule") || !j.at("proposed_rule").is_object() ||
        j.at("proposed_rule").empty())
        return {std::nullopt, "declined (no proposed_rule)"};

    const json& pr = j.at("proposed_rule");
    ProposedRule out;
    out.error_analysis = j.value("error_analysis", std::string{});
    out.rule = make_rule("", pr.value("category", std::string{}),
                         pr.value("trigger_condition", std::string{}),
                         pr.value("action_directive", std::string{}),
                         pr.value("rule_text", std::string{}));
    if (!has_if_then_shape(out.rule.rule_text)) return {std::nullopt, "malformed rule (no IF/THEN)"};
    if (out.rule.trigger_condition.empty() && out.rule.action_directive.empty())
        return {std::nullopt, "malformed rule (empty trigger and action)"};
    return {std::move(out), ""};
}

struct AdmitResult {
    bool admitted = false;
    std::string rule_id;
    std::string reason;  // set when rejected
};

namespace detail {

inline std::string category_prefix(const std::string& category) {
    std::string out;
    for (char ch : category) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) out.push_back(static_cast<char>(std::toupper(c)));
        else if (!out.empty() && out.back() != '_') out.push_back('_');
    }
    while (!out.empty() && out.back() == '_') out.pop_back();
    return out.empty() ? "GENERAL" : out;
}

}  // namespace detail

/// Deduplicate on (normalized trigger, normalized action), screen for
/// identifier leaks, and append under a per-category sequential id.
inline AdmitResult admit_rule(const ProposedRule& proposed, GlobalProtocol& protocol,
                              const IdentifierScreen& screen = IdentifierScreen{}) {
    if (protocol.frozen()) throw ProtocolFrozen("admit_rule on frozen protocol");

    std::string trig = normalize(proposed.rule.trigger_condition);
    std::string act = normalize(proposed.rule.action_directive);
    for (const auto& r : protocol.rules())
        if (normalize(r.trigger_condition) == trig && normalize(r.action_directive) == act)
            return {false, r.rule_id, "duplicate of " + r.rule_id};

    std::string screened = proposed.rule.rule_text + " " + proposed.rule.trigger_condition + " " +
                           proposed.rule.action_directive;
    if (screen.leaks(screened)) return {false, "", "identifier leak"};

    std::string prefix = detail::category_prefix(proposed.rule.category);
    size_t seq = 1;
    for (const auto& r : protocol.rules())
        if (detail::category_prefix(r.category) == prefix) ++seq;
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "_%03zu", seq);
    GlobalRule rule = proposed.rule;
    rule.rule_id = prefix + idbuf;
    protocol.append_rule(std::move(rule));
    return {true, prefix + idbuf, ""};
}

// ---------------------------------------------------------------------------
// Phase I driver
// ---------------------------------------------------------------------------

struct Phase1Options {
    AgentConfig agent;
    RiskVocabulary risk = RiskVocabulary::defaults();
    TemplateSet templates;
    AliasTable aliases;
    IdentifierScreen screen;
    int reflection_budget = 2000;  // token budget for the Reflector history slot
    int workers = 1;               // >1 selects the sharded merge mode
};

struct Phase1Result {
    GlobalProtocol protocol;  // frozen
    std::vector<json> induction_log;
    size_t failures = 0;
    size_t rules_admitted = 0;
    long long incidents = 0;
};

namespace detail {

inline std::string history_within_budget(const std::vector<std::string>& bundle_texts, int upto,
                                         int budget, const TokenCounter& tokens) {
    std::vector<std::string> parts;
    int total = 0;
    for (int i = upto; i >= 0; --i) {
        int t = tokens(bundle_texts[static_cast<size_t>(i)]);
        if (total + t > budget && !parts.empty()) break;
        parts.push_back(bundle_texts[static_cast<size_t>(i)]);
        total += t;
        if (total > budget) break;
    }
    std::reverse(parts.begin(), parts.end());
    std::string text = join(parts, "\n\n");
    if (tokens(text) > budget) text = truncate_words_front(text, budget);
    return text;
}

struct ShardOutcome {
    std::vector<ProposedRule> proposals;  // in shard corpus order
    std::vector<json> log;
    size_t failures = 0;
    long long incidents = 0;
};

inline ShardOutcome run_phase1_shard(const std::vector<const SerializedStream*>& shard,
                                     const GlobalProtocol& seed,
                                     std::shared_ptr<ChatBackend> backend,
                                     const Phase1Options& opt) {
    ShardOutcome out;
    // Unfrozen working copy the shard grows between trajectories.
    GlobalProtocol growing;
    for (const auto& r : seed.rules()) growing.append_rule(r);

    IdentifierScreen screen = opt.screen;
    for (const auto* stream : shard) {
        auto snapshot = std::make_shared<const GlobalProtocol>(growing.frozen_snapshot());
        AgentLoop loop(backend, opt.agent, opt.risk, opt.templates);
        InferenceState state;
        state.global = snapshot;
        TrajectoryReader reader(*stream);
        const int n = static_cast<int>(reader.size());
        for (int t = 0; t < n; ++t) {
            const EventBundle& bundle = reader.bundle(t);
            const std::string& text = reader.text(t);
            StepTrace trace = loop.step(state, bundle, text, stream->stay_id, t);
            reader.mark_predicted(t);
            if (t + 1 >= n) continue;
            TruthActions truth = actionable_truth(reader.bundle(t + 1));
            if (truth.actions.empty()) continue;
            if (!detect_failure(trace.final_actions, truth.actions, opt.aliases)) continue;
            ++out.failures;

            FailureCase fc;
            fc.stay_id = stream->stay_id;
            fc.t = t;
            fc.history_text = history_within_budget(stream->text_per_bundle, t,
                                                    opt.reflection_budget,
                                                    default_token_counter());
            fc.predicted = trace.prediction;
            fc.truth = truth.actions;
            ReflectOutcome reflected = reflect(fc, *backend, opt.templates);

            json log;
            log["stay_id"] = fc.stay_id;
            log["t"] = fc.t;
            log["truth"] = fc.truth;
            log["predicted"] = trace.final_actions;
            if (!reflected.proposed) {
                log["proposed"] = false;
                log["reason"] = reflected.decline_reason;
                out.log.push_back(std::move(log));
                continue;
            }
            log["proposed"] = true;
            log["rule_text"] = reflected.proposed->rule.rule_text;
            // Shard-local admission keeps in-shard routing consistent; the
            // final merge re-admits proposals under the global dedup rule.
            AdmitResult local = admit_rule(*reflected.proposed, growing, screen);
            log["admitted"] = local.admitted;
            log["rule_id"] = local.rule_id;
            if (!local.admitted) log["reason"] = local.reason;
            out.log.push_back(std::move(log));
            if (local.admitted) out.proposals.push_back(*reflected.proposed);
        }
        loop.finalize(state);
        out.incidents += loop.incidents();
    }
    return out;
}

}  // namespace detail

/// Phase I: stream the training corpus through the step loop, reflect on
/// failures, and grow the Global Protocol. The protocol is fixed within a
/// trajectory and grows between trajectories; the result is frozen. With
/// workers > 1 the corpus is sharded round-robin and shard proposals are
/// merged under the dedup rule, deterministically for a given shard count.
inline Phase1Result phase1_run(const std::vector<SerializedStream>& corpus,
                               std::shared_ptr<ChatBackend> backend, const Phase1Options& opt,
                               const GlobalProtocol* seed = nullptr) {
    if (corpus.empty()) throw EmptyCorpus("phase1_run: empty corpus");

    GlobalProtocol seed_protocol;
    if (seed) {
        if (seed->frozen())
            for (const auto& r : seed->rules()) seed_protocol.append_rule(r);
        else
            seed_protocol = *seed;
    }

    int workers = std::max(1, opt.workers);
    std::vector<std::vector<const SerializedStream*>> shards(static_cast<size_t>(workers));
    for (size_t i = 0; i < corpus.size(); ++i)
        shards[i % static_cast<size_t>(workers)].push_back(&corpus[i]);

    std::vector<detail::ShardOutcome> outcomes(shards.size());
    if (workers == 1) {
        outcomes[0] = detail::run_phase1_shard(shards[0], seed_protocol, backend, opt);
    } else {
        std::vector<std::thread> pool;
        for (size_t s = 0; s < shards.size(); ++s)
            pool.emplace_back([&, s]() {
                outcomes[s] = detail::run_phase1_shard(shards[s], seed_protocol, backend, opt);
            });
        for (auto& th : pool) th.join();
    }

    Phase1Result result;
    GlobalProtocol merged;
    for (const auto& r : seed_protocol.rules()) merged.append_rule(r);
    for (auto& shard : outcomes) {
        result.failures += shard.failures;
        result.incidents += shard.incidents;
        for (auto& rec : shard.log) result.induction_log.push_back(std::move(rec));
        for (const auto& proposal : shard.proposals) {
            AdmitResult res = admit_rule(proposal, merged, opt.screen);
            if (res.admitted) ++result.rules_admitted;
        }
    }
    merged.freeze();
    result.protocol = std::move(merged);
    return result;
}

}  // namespace trace
