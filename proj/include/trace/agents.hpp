#pragma once

#include <span>

#include "trace/backend.hpp"
#include "trace/memory.hpp"
#include "trace/step_trace.hpp"

namespace trace {

// ---------------------------------------------------------------------------
// Risk vocabulary
// ---------------------------------------------------------------------------

/// High-stakes intervention names/classes that force an audit regardless of
/// uncertainty. Matching is case-insensitive whole-word (a term may span
/// several words).
class RiskVocabulary {
public:
    RiskVocabulary() = default;
    explicit RiskVocabulary(std::vector<std::string> terms) {
        for (auto& t : terms) add(std::move(t));
    }

    void add(std::string term) {
        std::string n = normalize(term);
        if (!n.empty()) terms_.push_back(std::move(n));
    }

    const std::vector<std::string>& terms() const { return terms_; }
    bool empty() const { return terms_.empty(); }

    bool hit(std::string_view text) const {
        std::string h = normalize(text);
        for (const auto& term : terms_)
            if (contains_word(h, term)) return true;
        return false;
    }

    static bool contains_word(const std::string& haystack, const std::string& needle) {
        if (needle.empty()) return false;
        size_t pos = 0;
        while ((pos = haystack.find(needle, pos)) != std::string::npos) {
            bool lb = pos == 0 || !std::isalnum(static_cast<unsigned char>(haystack[pos - 1]));
            size_t after = pos + needle.size();
            bool rb = after >= haystack.size() ||
                      !std::isalnum(static_cast<unsigned char>(haystack[after]));
            if (lb && rb) return true;
            ++pos;
        }
        return false;
    }

    /// One term per line; '#' starts a comment.
    static RiskVocabulary from_file(const std::filesystem::path& path) {
        RiskVocabulary v;
        for (auto& line : split(read_file(path), '\n')) {
            auto hash = line.find('#');
            std::string term = trim(hash == std::string::npos ? line : line.substr(0, hash));
            if (!term.empty()) v.add(term);
        }
        return v;
    }

    /// Illustrative default list; institutions are expected to edit it.
    static RiskVocabulary defaults() {
        return RiskVocabulary({"anticoagulants", "insulin", "opioids", "vasopressors",
                               "sedatives", "chemotherapy"});
    }

private:
    std::vector<std::string> terms_;
};

// ---------------------------------------------------------------------------
// Audit trigger predicate
// ---------------------------------------------------------------------------

/// Audit iff U > tau (strict) or any predicted action mentions a risk term.
inline std::pair<bool, TriggerReason> should_audit(const Prediction& pred, double tau,
                                                   const RiskVocabulary& risk) {
    if (tau < 0) throw TraceError("should_audit: tau must be >= 0");
    bool uncertain = pred.uncertainty > tau;
    bool risky = false;
    for (const auto& a : pred.actions)
        if (risk.hit(a)) {
            risky = true;
            break;
        }
    TriggerReason reason = TriggerReason::None;
    if (uncertain && risky) reason = TriggerReason::Both;
    else if (uncertain) reason = TriggerReason::Uncertainty;
    else if (risky) reason = TriggerReason::SafetyVocab;
    return {uncertain || risky, reason};
}

// ---------------------------------------------------------------------------
// Agent loop configuration
// ---------------------------------------------------------------------------

/// Fixed token allocations per prompt section, in the configured token unit.
struct PromptBudgets {
    int system = 400;
    int rules = 600;
    int individual = 500;
    int buffer = 1500;

    int total() const { return system + rules + individual + buffer; }
};

struct AgentConfig {
    double tau_uncertainty = 0.7;
    int l_limit = 1500;  // buffer token threshold that triggers Mitosis
    PromptBudgets budgets;
    int max_candidates = 3;
    int max_actions = 5;
    int max_output_tokens = 768;
};

struct ReasonOutcome {
    Prediction prediction;
    std::vector<std::string> rendered_rule_ids;  // "[R-k]" numbering, post-truncation
    int state_item_count = 0;                    // "[S-k]" range in the rendered state
    std::map<std::string, int> prompt_tokens;
};

// ---------------------------------------------------------------------------
// The Phase-II online loop
// ---------------------------------------------------------------------------

/// One AgentLoop drives one trajectory at a time (single-writer state);
/// distinct trajectory workers each hold their own loop and share only the
/// frozen protocol and the synchronized backend.
class AgentLoop {
public:
    AgentLoop(std::shared_ptr<ChatBackend> backend, AgentConfig config, RiskVocabulary risk,
              TemplateSet templates = TemplateSet{},
              TokenCounter counter = default_token_counter())
        : backend_(std::move(backend)),
          cfg_(config),
          risk_(std::move(risk)),
          templates_(std::move(templates)),
          tokens_(std::move(counter)) {}

    const AgentConfig& config() const { return cfg_; }
    const RiskVocabulary& risk_vocabulary() const { return risk_; }
    long long incidents() const { return incidents_; }
    ChatBackend& backend() { return *backend_; }

    /// Step 1: trigger-guided routing. The deterministic prefilter runs
    /// first; the Router prompt is consulted only when the prefilter exceeds
    /// the candidate cap, and its answer is constrained to the prefilter.
    std::vector<const GlobalRule*> route(const EventBundle& bundle,
                                         const IndividualProtocol& individual,
                                         const GlobalProtocol& protocol,
                                         const std::string& current_text, bool* llm_used = nullptr) {
        if (llm_used) *llm_used = false;
        std::vector<std::string> ids = match_triggers(bundle, individual, protocol);
        if (static_cast<int>(ids.size()) <= cfg_.max_candidates) return resolve(ids, protocol);

        if (llm_used) *llm_used = true;
        std::string index_text;
        {
            std::vector<std::string> lines;
            for (const auto& id : ids)
                lines.push_back("- " + id + ": " + protocol.find(id)->trigger_condition);
            index_text = fit_lines_drop_longest(lines, cfg_.budgets.rules);
        }
        std::map<std::string, std::string> bindings{
            {"patient_state_json", individual.to_json().dump(2)},
            {"recent_events_text", truncate_words_front(current_text, cfg_.budgets.buffer)},
            {"protocol_index_list", index_text},
        };
        std::vector<std::string> selected;
        try {
            auto resp = call(TemplateId::Router, templates_.render(TemplateId::Router, bindings));
            json j = extract_json(resp.text);
            std::vector<std::string> prefilter(ids.begin(), ids.end());
            for (const auto& v : j.at("selected_protocol_ids")) {
                if (!v.is_string()) continue;
                std::string id = v.get<std::string>();
                if (std::find(prefilter.begin(), prefilter.end(), id) == prefilter.end()) continue;
                if (std::find(selected.begin(), selected.end(), id) != selected.end()) continue;
                selected.push_back(id);
                if (static_cast<int>(selected.size()) >= cfg_.max_candidates) break;
            }
        } catch (const TraceError&) {
            ++incidents_;
            selected.assign(ids.begin(),
                            ids.begin() + std::min<size_t>(ids.size(),
                                                           static_cast<size_t>(cfg_.max_candidates)));
        }
        return resolve(selected, protocol);
    }

    /// Step 2: predictive reasoning over C_t, the structured state, and the
    /// rolling buffer plus the just-observed bundle.
    ReasonOutcome reason(const std::vector<const GlobalRule*>& candidates,
                         const IndividualProtocol& individual,
                         const std::vector<BufferEntry>& buffer,
                         const std::string& current_text) {
        ReasonOutcome out;

        std::string rules_text;
        {
            // Drop the longest rules until the section fits its budget, then
            // number what remains so [R-k] always points into the rendered
            // list.
            std::vector<const GlobalRule*> kept = candidates;
            auto line_tokens = [&](const GlobalRule* r) {
                return tokens_(r->rule_id) + tokens_(r->rule_text) + 2;
            };
            auto total = [&]() {
                int t = 0;
                for (const auto* r : kept) t += line_tokens(r);
                return t;
            };
            while (kept.size() > 1 && total() > cfg_.budgets.rules) {
                auto longest = std::max_element(kept.begin(), kept.end(),
                                                [&](const GlobalRule* a, const GlobalRule* b) {
                                                    return line_tokens(a) < line_tokens(b);
                                                });
                kept.erase(longest);
            }
            std::vector<std::string> lines;
            for (size_t k = 0; k < kept.size(); ++k) {
                out.rendered_rule_ids.push_back(kept[k]->rule_id);
                lines.push_back("[R-" + std::to_string(k + 1) + "] (" + kept[k]->rule_id + ") " +
                                kept[k]->rule_text);
            }
            rules_text = lines.empty() ? "(no protocol rules selected)" : join(lines, "\n");
        }

        auto [state_text, state_items] =
            render_state_annotated(individual, cfg_.budgets.individual);
        out.state_item_count = state_items;

        std::string history_text = render_history(buffer, current_text, cfg_.budgets.buffer);

        std::map<std::string, std::string> bindings{
            {"selected_rules_text", rules_text},
            {"patient_state_json", state_text},
            {"event_stream_history", history_text},
        };
        std::string prompt = templates_.render(TemplateId::Reasoner, bindings);
        out.prompt_tokens["rules"] = tokens_(rules_text);
        out.prompt_tokens["individual"] = tokens_(state_text);
        out.prompt_tokens["buffer"] = tokens_(history_text);
        out.prompt_tokens["total"] = tokens_(prompt);
        out.prompt_tokens["system"] = out.prompt_tokens["total"] - out.prompt_tokens["rules"] -
                                      out.prompt_tokens["individual"] -
                                      out.prompt_tokens["buffer"];

        out.prediction = parse_prediction_with_retry(prompt);
        return out;
    }

    /// Step 3 (conditional): safety audit of the proposed actions.
    /// Verifier outage is fail-open: the prediction stands, the incident is
    /// counted, and the critique marks the verdict as unaudited.
    AuditVerdict audit(const Prediction& pred, const std::vector<const GlobalRule*>& candidates,
                       const IndividualProtocol& individual, TriggerReason reason) {
        AuditVerdict v;
        v.triggered = true;
        v.trigger_reason = reason;

        std::map<std::string, std::string> bindings{
            {"proposed_actions_list", bullet_list(pred.actions)},
            {"active_problems_list", bullet_list(individual.active_problems())},
            {"active_rules_text", rules_plain_text(candidates)},
        };
        try {
            auto resp = call(TemplateId::Auditor, templates_.render(TemplateId::Auditor, bindings));
            json j = extract_json(resp.text);
            std::string status = to_lower(trim(j.value("status", std::string{})));
            if (status != "pass" && status != "fail")
                throw MalformedBackendReply("auditor status: " + status);
            v.status = status == "pass" ? AuditStatus::Pass : AuditStatus::Fail;
            std::string risk = to_lower(trim(j.value("risk_level", std::string{})));
            v.risk_level = risk == "high" ? RiskLevel::High : RiskLevel::Low;
            v.critique = j.value("critique", std::string{});
            if (v.status == AuditStatus::Fail) {
                std::vector<std::string> corrected;
                if (j.contains("corrected_actions") && j.at("corrected_actions").is_array()) {
                    for (const auto& a : j.at("corrected_actions"))
                        if (a.is_string()) corrected.push_back(a.get<std::string>());
                } else if (j.contains("corrected_action") && j.at("corrected_action").is_string()) {
                    std::string one = trim(j.at("corrected_action").get<std::string>());
                    if (!one.empty()) corrected.push_back(one);
                }
                if (!corrected.empty()) v.corrected_actions = std::move(corrected);
            }
        } catch (const TraceError&) {
            ++incidents_;
            v.status = AuditStatus::Pass;
            v.risk_level = RiskLevel::Low;
            v.critique = "auditor-unavailable";
        }
        return v;
    }

    /// Step 4: Mitosis. The backend proposes the full updated state; a
    /// deterministic post-pass then enforces the medication hard rules from
    /// the flushed orders, whatever the backend said. The buffer is emptied.
    void steward_update(InferenceState& state) {
        std::vector<BufferEntry> flushed = std::move(state.buffer);
        state.buffer.clear();
        state.buffer_tokens = 0;
        if (flushed.empty()) return;

        std::vector<std::string> texts;
        for (const auto& e : flushed) texts.push_back(e.text);
        std::map<std::string, std::string> bindings{
            {"current_state_json", state.individual.to_json().dump(2)},
            {"new_event_bundle_text", join(texts, "\n")},
        };
        std::string prompt = templates_.render(TemplateId::Steward, bindings);

        IndividualProtocol updated = state.individual;
        bool parsed = false;
        for (int attempt = 0; attempt < 2 && !parsed; ++attempt) {
            try {
                auto resp = call(TemplateId::Steward, prompt);
                updated = IndividualProtocol::from_json(extract_json(resp.text), state.individual);
                parsed = true;
            } catch (const TraceError&) {
            }
        }
        if (!parsed) ++incidents_;  // deterministic-only update below

        // Hard rules: replay the flushed medication orders in event order so
        // the most recent order for a drug wins.
        for (const auto& entry : flushed)
            for (const auto& order : entry.med_orders) {
                if (order.phase == MedPhase::Stop) updated.remove_med(order.drug);
                else if (!updated.has_med(order.drug)) updated.add_med(order.drug);
            }
        state.individual = std::move(updated);
    }

    /// The full per-timestep loop: route, reason, conditional audit, buffer
    /// push, Mitosis when over budget. Never throws on agent failures; an
    /// abstained prediction flows through as a scored miss.
    StepTrace step(InferenceState& state, const EventBundle& bundle,
                   const std::string& bundle_text, const std::string& stay_id, int t) {
        step_max_prompt_tokens_ = 0;

        StepTrace trace;
        trace.stay_id = stay_id;
        trace.t = t;

        auto candidates =
            route(bundle, state.individual, *state.global, bundle_text, &trace.router_llm_used);
        for (const auto* r : candidates) trace.activated_rule_ids.push_back(r->rule_id);

        ReasonOutcome reasoned = reason(candidates, state.individual, state.buffer, bundle_text);
        trace.prediction = reasoned.prediction;
        trace.prompt_tokens = reasoned.prompt_tokens;

        auto [trigger, reason_kind] = should_audit(trace.prediction, cfg_.tau_uncertainty, risk_);
        if (trigger) {
            trace.verdict = audit(trace.prediction, candidates, state.individual, reason_kind);
        } else {
            trace.verdict.triggered = false;
            trace.verdict.trigger_reason = TriggerReason::None;
            trace.verdict.status = AuditStatus::NotRun;
            trace.verdict.risk_level = RiskLevel::NotRun;
        }
        trace.final_actions =
            (trace.verdict.status == AuditStatus::Fail && trace.verdict.corrected_actions)
                ? *trace.verdict.corrected_actions
                : trace.prediction.actions;

        resolve_citations(trace, candidates, reasoned);

        buffer_push(state, bundle_text, tokens_(bundle_text), med_orders_of(bundle));
        if (state.buffer_tokens > cfg_.l_limit) steward_update(state);

        std::string state_text = serialize_individual(state.individual);
        trace.state_hash = digest_hex(state_text);
        trace.state_snapshot = state.individual.to_json();
        trace.max_prompt_tokens = step_max_prompt_tokens_;
        return trace;
    }

    /// Absorb a bundle into state without predicting (used for the final
    /// bundle of a trajectory, which has no next step to predict).
    void absorb(InferenceState& state, const EventBundle& bundle, const std::string& bundle_text) {
        buffer_push(state, bundle_text, tokens_(bundle_text), med_orders_of(bundle));
        if (state.buffer_tokens > cfg_.l_limit) steward_update(state);
    }

    /// Flush whatever remains in the buffer (trajectory end).
    void finalize(InferenceState& state) {
        if (!state.buffer.empty()) steward_update(state);
    }

    ChatResponse call(TemplateId id, const std::string& prompt) {
        step_max_prompt_tokens_ = std::max(step_max_prompt_tokens_, tokens_(prompt));
        ChatRequest req;
        req.template_id = id;
        req.rendered_prompt = prompt;
        req.max_output_tokens = cfg_.max_output_tokens;
        req.want_logprobs = true;
        return backend_->complete(req);
    }

private:
    std::vector<const GlobalRule*> resolve(const std::vector<std::string>& ids,
                                           const GlobalProtocol& protocol) const {
        std::vector<const GlobalRule*> out;
        for (const auto& id : ids)
            if (const auto* r = protocol.find(id)) out.push_back(r);
        return out;
    }

    Prediction parse_prediction_with_retry(const std::string& prompt) {
        for (int attempt = 0; attempt < 2; ++attempt) {
            auto resp = call(TemplateId::Reasoner, prompt);
            try {
                return parse_prediction(resp);
            } catch (const TraceError&) {
                if (attempt == 1) ++incidents_;
            }
        }
        Prediction abstain;
        abstain.abstained = true;
        abstain.thought = "abstained: malformed reasoner reply";
        return abstain;
    }

    Prediction parse_prediction(const ChatResponse& resp) {
        json j = extract_json(resp.text);
        Prediction p;
        p.thought = j.value("thought_process", std::string{});
        std::string bt = to_lower(trim(j.value("next_bundle_type", std::string{})));
        if (bt == "labs") p.bundle_type = BundleType::Labs;
        else if (bt == "procedures") p.bundle_type = BundleType::Procedures;
        else p.bundle_type = BundleType::Medications;
        if (!j.contains("predicted_actions") || !j.at("predicted_actions").is_array())
            throw MalformedBackendReply("reasoner reply lacks predicted_actions");
        for (const auto& a : j.at("predicted_actions")) {
            if (!a.is_string()) continue;
            p.actions.push_back(a.get<std::string>());
            if (static_cast<int>(p.actions.size()) >= cfg_.max_actions) break;
        }
        if (p.actions.empty()) throw MalformedBackendReply("reasoner reply has no actions");
        if (j.contains("citations") && j.at("citations").is_array())
            for (const auto& c : j.at("citations"))
                if (c.is_string()) p.citations.push_back(c.get<std::string>());
        if (resp.token_logprobs && !resp.token_logprobs->empty()) {
            p.raw_logprobs = *resp.token_logprobs;
            double sum = 0;
            for (double lp : p.raw_logprobs) sum += lp;
            p.uncertainty = -(sum / static_cast<double>(p.raw_logprobs.size()));
        } else {
            p.uncertainty = std::numeric_limits<double>::infinity();
        }
        return p;
    }

    void resolve_citations(StepTrace& trace, const std::vector<const GlobalRule*>& candidates,
                           const ReasonOutcome& reasoned) const {
        trace.citation_valid = true;
        for (const auto& raw : trace.prediction.citations) {
            std::string c = trim(raw);
            if (!c.empty() && c.front() == '[') c.erase(0, 1);
            if (!c.empty() && c.back() == ']') c.pop_back();
            c = trim(c);
            bool valid = false;
            if (c.size() > 2 && (c[0] == 'R' || c[0] == 'r') && c[1] == '-') {
                std::string rest = c.substr(2);
                if (std::all_of(rest.begin(), rest.end(),
                                [](unsigned char ch) { return std::isdigit(ch); })) {
                    size_t k = static_cast<size_t>(std::stoul(rest));
                    if (k >= 1 && k <= reasoned.rendered_rule_ids.size()) {
                        add_cited(trace, reasoned.rendered_rule_ids[k - 1]);
                        valid = true;
                    }
                } else {
                    valid = add_candidate_citation(trace, candidates, rest);
                }
            } else if (c.size() > 2 && (c[0] == 'S' || c[0] == 's') && c[1] == '-') {
                std::string rest = c.substr(2);
                if (std::all_of(rest.begin(), rest.end(),
                                [](unsigned char ch) { return std::isdigit(ch); })) {
                    size_t k = static_cast<size_t>(std::stoul(rest));
                    valid = k >= 1 && k <= static_cast<size_t>(reasoned.state_item_count);
                }
            } else {
                valid = add_candidate_citation(trace, candidates, c);
            }
            if (!valid) trace.citation_valid = false;
        }
    }

    static bool add_candidate_citation(StepTrace& trace,
                                       const std::vector<const GlobalRule*>& candidates,
                                       const std::string& id) {
        for (const auto* r : candidates)
            if (r->rule_id == id) {
                add_cited(trace, id);
                return true;
            }
        return false;
    }

    static void add_cited(StepTrace& trace, const std::string& id) {
        if (std::find(trace.cited_rule_ids.begin(), trace.cited_rule_ids.end(), id) ==
            trace.cited_rule_ids.end())
            trace.cited_rule_ids.push_back(id);
    }

    /// Annotated state for the Reasoner: every list item carries its [S-k]
    /// id. Over budget, history is dropped first, then the oldest trends,
    /// then the oldest procedures; problems and meds are never dropped.
    std::pair<std::string, int> render_state_annotated(const IndividualProtocol& individual,
                                                       int budget) const {
        IndividualProtocol slim = individual;
        bool include_history = true;
        for (;;) {
            int k = 0;
            json j;
            auto annotate = [&k](const std::vector<std::string>& items) {
                json arr = json::array();
                for (const auto& s : items) arr.push_back("[S-" + std::to_string(++k) + "] " + s);
                return arr;
            };
            j["active_problems"] = annotate(slim.active_problems());
            j["current_meds"] = annotate(slim.current_meds());
            j["procedures"] = annotate(slim.procedures());
            j["trends"] = annotate(slim.trends());
            if (include_history) {
                json h = json::array();
                for (const auto& e : slim.history())
                    h.push_back({{"item", e.item}, {"resolved_at", e.resolved_at}});
                j["history"] = std::move(h);
            }
            std::string text = j.dump(2);
            if (tokens_(text) <= budget) return {text, k};
            if (include_history) {
                include_history = false;
                continue;
            }
            if (slim.trends().empty() && slim.procedures().empty())
                return {truncate_words_front(text, budget), k};
            IndividualProtocol next;
            for (const auto& s : slim.active_problems()) next.add_problem(s);
            for (const auto& s : slim.current_meds()) next.add_med(s);
            bool drop_trend = !slim.trends().empty();
            const auto& procs = slim.procedures();
            for (size_t i = (!drop_trend && !procs.empty()) ? 1 : 0; i < procs.size(); ++i)
                next.add_procedure(procs[i]);
            const auto& trends = slim.trends();
            for (size_t i = drop_trend ? 1 : 0; i < trends.size(); ++i) next.add_trend(trends[i]);
            slim = std::move(next);
        }
    }

    std::string render_history(const std::vector<BufferEntry>& buffer,
                               const std::string& current_text, int budget) const {
        std::vector<std::string> parts;
        int total = tokens_(current_text);
        // newest first retained: walk the buffer backwards, then restore order
        for (auto it = buffer.rbegin(); it != buffer.rend(); ++it) {
            if (total + it->tokens > budget) break;
            parts.push_back(it->text);
            total += it->tokens;
        }
        std::reverse(parts.begin(), parts.end());
        parts.push_back(current_text);
        std::string text = join(parts, "\n\n");
        if (tokens_(text) > budget) text = truncate_words_front(text, budget);
        return text;
    }

    /// Drop the longest lines until the joined text fits the budget.
    std::string fit_lines_drop_longest(std::vector<std::string> lines, int budget) const {
        return join(fit_lines_drop_longest_keep(std::move(lines), budget), "\n");
    }

    std::vector<std::string> fit_lines_drop_longest_keep(std::vector<std::string> lines,
                                                         int budget) const {
        auto total = [&]() {
            int t = 0;
            for (const auto& l : lines) t += tokens_(l);
            return t;
        };
        while (lines.size() > 1 && total() > budget) {
            auto longest = std::max_element(lines.begin(), lines.end(),
                                            [&](const std::string& a, const std::string& b) {
                                                return tokens_(a) < tokens_(b);
                                            });
            lines.erase(longest);
        }
        if (!lines.empty() && total() > budget)
            lines[0] = truncate_words_front(lines[0], budget);
        return lines;
    }

    static std::string bullet_list(const std::vector<std::string>& items) {
        if (items.empty()) return "(none)";
        std::string out;
        for (const auto& s : items) out += "- " + s + "\n";
        out.pop_back();
        return out;
    }

    static std::string rules_plain_text(const std::vector<const GlobalRule*>& candidates) {
        if (candidates.empty()) return "(none)";
        std::string out;
        for (const auto* r : candidates) out += "- (" + r->rule_id + ") " + r->rule_text + "\n";
        out.pop_back();
        return out;
    }

    std::shared_ptr<ChatBackend> backend_;
    AgentConfig cfg_;
    RiskVocabulary risk_;
    TemplateSet templates_;
    TokenCounter tokens_;
    long long incidents_ = 0;
    int step_max_prompt_tokens_ = 0;
};

}  // namespace trace
