#pragma once

#include <atomic>
#include <future>
#include <numeric>
#include <set>

#include "trace/agents.hpp"
#include "trace/bundler.hpp"

namespace trace {

class ProtocolNotFrozen : public TraceError {
public:
    explicit ProtocolNotFrozen(const std::string& what) : TraceError(what) {}
};

class EmptyTruth : public TraceError {
public:
    explicit EmptyTruth(const std::string& what) : TraceError(what) {}
};

// ---------------------------------------------------------------------------
// Match normalization and aliases
// ---------------------------------------------------------------------------

/// Optional equivalence classes over normalized action strings ("NS bolus" ~
/// "crystalloid bolus"). Empty by default; any default aliasing would be
/// invented clinical knowledge.
class AliasTable {
public:
    AliasTable() = default;

    /// JSON: an array of groups, each an array of equivalent strings.
    static AliasTable from_json(const json& j) {
        AliasTable t;
        for (const auto& group : j) {
            std::string root;
            for (const auto& term : group) {
                std::string n = normalize(term.get<std::string>());
                if (n.empty()) continue;
                if (root.empty()) root = t.canon(n);
                t.merge(n, root);
            }
        }
        return t;
    }

    static AliasTable from_file(const std::filesystem::path& path) {
        return from_json(json::parse(read_file(path)));
    }

    std::string canon(const std::string& normalized) const {
        std::string cur = normalized;
        auto it = parent_.find(cur);
        while (it != parent_.end() && it->second != cur) {
            cur = it->second;
            it = parent_.find(cur);
        }
        return cur;
    }

    bool matches(const std::string& a, const std::string& b) const {
        return canon(normalize(a)) == canon(normalize(b));
    }

private:
    void merge(const std::string& n, const std::string& root) {
        std::string ra = canon(n), rb = canon(root);
        if (ra != rb) parent_[ra] = rb;
        parent_.try_emplace(rb, rb);
    }

    std::unordered_map<std::string, std::string> parent_;
};

// ---------------------------------------------------------------------------
// Recall@k
// ---------------------------------------------------------------------------

/// |match(pred[0..k], truth)| / |truth| where each truth item is matchable at
/// most once. Computed as a maximum bipartite matching so alias groups cannot
/// starve one another.
inline double recall_at_k(const std::vector<std::string>& pred_actions,
                          const std::vector<std::string>& truth_actions, int k = 5,
                          const AliasTable& aliases = AliasTable{}) {
    if (truth_actions.empty()) throw EmptyTruth("recall_at_k: empty truth set");
    size_t np = std::min(pred_actions.size(), static_cast<size_t>(k));
    size_t nt = truth_actions.size();

    std::vector<std::vector<char>> edge(np, std::vector<char>(nt, 0));
    for (size_t i = 0; i < np; ++i)
        for (size_t j = 0; j < nt; ++j)
            edge[i][j] = aliases.matches(pred_actions[i], truth_actions[j]) ? 1 : 0;

    std::vector<int> match_of_truth(nt, -1);
    std::function<bool(size_t, std::vector<char>&)> augment = [&](size_t i,
                                                                  std::vector<char>& seen) {
        for (size_t j = 0; j < nt; ++j) {
            if (!edge[i][j] || seen[j]) continue;
            seen[j] = 1;
            if (match_of_truth[j] < 0 ||
                augment(static_cast<size_t>(match_of_truth[j]), seen)) {
                match_of_truth[j] = static_cast<int>(i);
                return true;
            }
        }
        return false;
    };
    int matched = 0;
    for (size_t i = 0; i < np; ++i) {
        std::vector<char> seen(nt, 0);
        if (augment(i, seen)) ++matched;
    }
    return static_cast<double>(matched) / static_cast<double>(nt);
}

// ---------------------------------------------------------------------------
// Trace-level metrics
// ---------------------------------------------------------------------------

/// Fraction of steps with activated rules whose prediction validly cites one
/// of them. Steps without activated rules are excluded from the denominator;
/// absent when no step is eligible.
inline std::optional<double> protocol_adherence(const std::vector<StepTrace>& traces) {
    size_t eligible = 0, hits = 0;
    for (const auto& s : traces) {
        if (s.activated_rule_ids.empty()) continue;
        ++eligible;
        if (!s.citation_valid) continue;
        bool cites_activated = false;
        for (const auto& id : s.cited_rule_ids)
            if (std::find(s.activated_rule_ids.begin(), s.activated_rule_ids.end(), id) !=
                s.activated_rule_ids.end()) {
                cites_activated = true;
                break;
            }
        if (cites_activated) ++hits;
    }
    if (eligible == 0) return std::nullopt;
    return static_cast<double>(hits) / static_cast<double>(eligible);
}

inline double activation_rate(const std::vector<StepTrace>& traces) {
    if (traces.empty()) throw TraceError("activation_rate: no traces");
    size_t triggered = 0;
    for (const auto& s : traces)
        if (s.verdict.triggered) ++triggered;
    return static_cast<double>(triggered) / static_cast<double>(traces.size());
}

/// Judge-scored plan acceptability in [1,5]; absent on a malformed reply.
inline std::optional<int> clinical_equivalence(ChatBackend& judge,
                                               const std::vector<std::string>& pred_actions,
                                               const std::vector<std::string>& truth_actions,
                                               const std::string& context,
                                               const TemplateSet& templates = TemplateSet{}) {
    auto bullets = [](const std::vector<std::string>& items) {
        if (items.empty()) return std::string("(none)");
        std::string out;
        for (const auto& s : items) out += "- " + s + "\n";
        out.pop_back();
        return out;
    };
    ChatRequest req;
    req.template_id = TemplateId::Judge;
    req.rendered_prompt = templates.render(
        TemplateId::Judge, {{"context_text", context.empty() ? "(none)" : context},
                            {"predicted_actions_list", bullets(pred_actions)},
                            {"reference_actions_list", bullets(truth_actions)}});
    req.want_logprobs = false;
    ChatResponse resp;
    try {
        resp = judge.complete(req);
    } catch (const TraceError&) {
        return std::nullopt;
    }

    std::optional<long> score;
    try {
        json j = extract_json(resp.text);
        if (j.contains("score") && j.at("score").is_number())
            score = std::llround(j.at("score").get<double>());
    } catch (const TraceError&) {
        // bare integer replies are accepted; anything else is a decline
        std::string t = trim(resp.text);
        if (!t.empty() && std::all_of(t.begin(), t.end(), [](unsigned char c) {
                return std::isdigit(c) != 0;
            }))
            score = std::stol(t);
    }
    if (!score) return std::nullopt;
    return static_cast<int>(std::clamp(*score, 1L, 5L));
}

// ---------------------------------------------------------------------------
// Ground-truth extraction
// ---------------------------------------------------------------------------

enum class ActionCategory { Medication, LabOrder, Procedure };

inline std::string_view to_string(ActionCategory c) {
    switch (c) {
        case ActionCategory::Medication: return "Medication";
        case ActionCategory::LabOrder: return "LabOrder";
        case ActionCategory::Procedure: return "Procedure";
    }
    return "?";
}

struct TruthActions {
    std::vector<std::string> actions;  // deduplicated under normalization
    std::optional<ActionCategory> category;
};

/// Y*: the rendered action strings of a bundle restricted to actionable
/// kinds. Medication starts keep their rendered line, labs contribute their
/// order names (analytes), procedures their rendered line. The category is
/// the majority actionable kind, ties broken Medication > LabOrder >
/// Procedure.
inline TruthActions actionable_truth(const EventBundle& bundle) {
    TruthActions out;
    std::set<std::string> seen;
    size_t meds = 0, labs = 0, procs = 0;
    auto add = [&](std::string s) {
        if (seen.insert(normalize(s)).second) out.actions.push_back(std::move(s));
    };
    for (const auto& e : bundle.events) {
        switch (e.kind) {
            case EventKind::MedicationStart:
                ++meds;
                add(e.rendered);
                break;
            case EventKind::LabResult:
                ++labs;
                add(std::get<LabPayload>(e.payload).analyte);
                break;
            case EventKind::Procedure:
                ++procs;
                add(e.rendered);
                break;
            default:
                break;
        }
    }
    if (out.actions.empty()) return out;
    if (meds >= labs && meds >= procs) out.category = ActionCategory::Medication;
    else if (labs >= procs) out.category = ActionCategory::LabOrder;
    else out.category = ActionCategory::Procedure;
    return out;
}

// ---------------------------------------------------------------------------
// Instrumented corpus reader (no-lookahead certificate)
// ---------------------------------------------------------------------------

/// Hands out bundles while recording access order, so a run can prove that
/// bundle t+1 was first read strictly after the step-t prediction was
/// finalized.
class TrajectoryReader {
public:
    explicit TrajectoryReader(const SerializedStream& stream) : stream_(&stream) {}

    size_t size() const { return stream_->bundles.size(); }
    const std::string& stay_id() const { return stream_->stay_id; }

    const EventBundle& bundle(int t) {
        log_read(t);
        return stream_->bundles.at(static_cast<size_t>(t));
    }

    const std::string& text(int t) {
        log_read(t);
        return stream_->text_per_bundle.at(static_cast<size_t>(t));
    }

    void mark_predicted(int t) { log_.emplace_back('p', t); }

    /// True iff, for every t >= 1, the first read of bundle t happened after
    /// prediction t-1 was marked, and every prediction was marked.
    bool verify_no_lookahead() const {
        std::set<int> predicted;
        std::set<int> read;
        for (const auto& [kind, t] : log_) {
            if (kind == 'p') {
                predicted.insert(t);
            } else if (read.insert(t).second) {
                if (t >= 1 && !predicted.count(t - 1)) return false;
            }
        }
        // every non-final step must have produced a prediction
        for (int t = 0; t + 1 < static_cast<int>(size()); ++t)
            if (!predicted.count(t)) return false;
        return true;
    }

    const std::vector<std::pair<char, int>>& access_log() const { return log_; }

private:
    void log_read(int t) { log_.emplace_back('r', t); }

    const SerializedStream* stream_;
    std::vector<std::pair<char, int>> log_;
};

// ---------------------------------------------------------------------------
// Metrics report
// ---------------------------------------------------------------------------

struct MetricsReport {
    struct Recall {
        double value = 0.0;
        size_t steps = 0;
    };

    std::map<std::string, Recall> recall_at_5;  // Medication / LabOrder / Procedure
    std::optional<double> adherence;
    size_t adherence_eligible = 0;
    double activation = 0.0;
    std::optional<double> equivalence_mean;
    size_t equivalence_count = 0;

    size_t steps_total = 0;
    size_t steps_scored = 0;
    size_t steps_skipped_empty_truth = 0;
    size_t trajectories = 0;
    size_t trajectories_failed = 0;

    json to_json() const {
        json j;
        json rec;
        for (const auto& [cat, r] : recall_at_5)
            rec[cat] = json{{"value", r.steps ? json(r.value) : json()}, {"steps", r.steps}};
        j["recall_at_5"] = std::move(rec);
        j["adherence"] = adherence ? json(*adherence) : json();
        j["adherence_eligible_steps"] = adherence_eligible;
        j["activation_rate"] = activation;
        j["equivalence_mean"] = equivalence_mean ? json(*equivalence_mean) : json();
        j["equivalence_count"] = equivalence_count;
        json counts;
        counts["steps_total"] = steps_total;
        counts["steps_scored"] = steps_scored;
        counts["steps_skipped_empty_truth"] = steps_skipped_empty_truth;
        counts["trajectories"] = trajectories;
        counts["trajectories_failed"] = trajectories_failed;
        j["counts"] = std::move(counts);
        return j;
    }

    /// Aligned one-row table mirroring the headline metric columns.
    std::string to_table() const {
        char buf[256];
        auto rec = [&](const char* cat) -> std::string {
            auto it = recall_at_5.find(cat);
            if (it == recall_at_5.end() || it->second.steps == 0) return "-";
            std::snprintf(buf, sizeof(buf), "%.4f", it->second.value);
            return buf;
        };
        auto pct = [&](const std::optional<double>& v) -> std::string {
            if (!v) return "-";
            std::snprintf(buf, sizeof(buf), "%.2f%%", *v * 100.0);
            return buf;
        };
        std::string equiv = "-";
        if (equivalence_mean) {
            std::snprintf(buf, sizeof(buf), "%.2f", *equivalence_mean);
            equiv = buf;
        }
        std::string header1 = "Medication  Lab Order   Procedure   Clinical     Protocol    Auditor";
        std::string header2 = "Recall@5    Recall@5    Recall@5    Equivalence  Adherence   Activation Rate";
        auto pad = [](std::string s, size_t w) {
            if (s.size() < w) s.append(w - s.size(), ' ');
            return s;
        };
        std::string row = pad(rec("Medication"), 12) + pad(rec("LabOrder"), 12) +
                          pad(rec("Procedure"), 12) + pad(equiv, 13) + pad(pct(adherence), 12) +
                          pct(std::optional<double>(activation));
        return header1 + "\n" + header2 + "\n" + row + "\n";
    }
};

inline MetricsReport compute_metrics(const std::vector<StepTrace>& traces) {
    MetricsReport m;
    m.steps_total = traces.size();
    std::map<std::string, std::pair<double, size_t>> recall_acc;
    for (const auto& s : traces) {
        if (s.scored && s.recall_at_5) {
            auto& [sum, n] = recall_acc[s.truth_category];
            sum += *s.recall_at_5;
            ++n;
            ++m.steps_scored;
        }
        if (s.equivalence) {
            m.equivalence_mean = m.equivalence_mean.value_or(0.0) + *s.equivalence;
            ++m.equivalence_count;
        }
    }
    for (const char* cat : {"Medication", "LabOrder", "Procedure"}) {
        auto it = recall_acc.find(cat);
        MetricsReport::Recall r;
        if (it != recall_acc.end() && it->second.second > 0) {
            r.value = it->second.first / static_cast<double>(it->second.second);
            r.steps = it->second.second;
        }
        m.recall_at_5[cat] = r;
    }
    if (m.equivalence_count)
        m.equivalence_mean = *m.equivalence_mean / static_cast<double>(m.equivalence_count);
    m.adherence = protocol_adherence(traces);
    size_t eligible = 0;
    for (const auto& s : traces)
        if (!s.activated_rule_ids.empty()) ++eligible;
    m.adherence_eligible = eligible;
    m.activation = traces.empty() ? 0.0 : activation_rate(traces);
    return m;
}

// ---------------------------------------------------------------------------
// Prequential runner
// ---------------------------------------------------------------------------

struct EvalOptions {
    AgentConfig agent;
    RiskVocabulary risk = RiskVocabulary::defaults();
    TemplateSet templates;
    AliasTable aliases;
    bool judge_enabled = false;
    int recall_k = 5;
    int workers = 1;
};

struct PrequentialResult {
    MetricsReport report;
    std::vector<StepTrace> traces;    // corpus order
    std::vector<json> trace_records;  // step records plus one end record per trajectory
    long long incidents = 0;
    bool lookahead_certified = false;
    std::string protocol_hash;
    size_t trajectories_failed = 0;
};

namespace detail {

struct TrajectoryOutcome {
    std::vector<StepTrace> traces;
    json end_record;
    bool lookahead_ok = false;
    long long incidents = 0;
    bool failed = false;
    std::string error;
};

inline TrajectoryOutcome run_trajectory(const SerializedStream& stream,
                                        std::shared_ptr<const GlobalProtocol> protocol,
                                        std::shared_ptr<ChatBackend> backend,
                                        const EvalOptions& opt) {
    TrajectoryOutcome out;
    try {
        AgentLoop loop(backend, opt.agent, opt.risk, opt.templates);
        InferenceState state;
        state.global = protocol;
        TrajectoryReader reader(stream);
        const int n = static_cast<int>(reader.size());
        for (int t = 0; t < n; ++t) {
            const EventBundle& bundle = reader.bundle(t);
            const std::string& text = reader.text(t);
            StepTrace trace = loop.step(state, bundle, text, stream.stay_id, t);
            reader.mark_predicted(t);
            if (t + 1 < n) {
                TruthActions truth = actionable_truth(reader.bundle(t + 1));
                if (!truth.actions.empty()) {
                    trace.scored = true;
                    trace.truth_category = std::string(to_string(*truth.category));
                    trace.truth_actions = truth.actions;
                    trace.recall_at_5 =
                        recall_at_k(trace.final_actions, truth.actions, opt.recall_k, opt.aliases);
                    if (opt.judge_enabled)
                        trace.equivalence = clinical_equivalence(*backend, trace.final_actions,
                                                                 truth.actions, text,
                                                                 opt.templates);
                }
            }
            out.traces.push_back(std::move(trace));
        }
        loop.finalize(state);
        out.end_record = json{{"record", "end"},
                              {"stay_id", stream.stay_id},
                              {"state", state.individual.to_json()},
                              {"state_hash", digest_hex(serialize_individual(state.individual))}};
        out.lookahead_ok = reader.verify_no_lookahead();
        out.incidents = loop.incidents();
    } catch (const std::exception& e) {
        out.failed = true;
        out.error = e.what();
    }
    return out;
}

}  // namespace detail

/// Streaming predict-then-update evaluation over a serialized corpus with a
/// frozen protocol. Trajectory workers share only the protocol and the
/// backend; results are merged in corpus order so worker scheduling cannot
/// change any output byte.
inline PrequentialResult prequential_run(const std::vector<SerializedStream>& corpus,
                                         std::shared_ptr<const GlobalProtocol> protocol,
                                         std::shared_ptr<ChatBackend> backend,
                                         const EvalOptions& opt = EvalOptions{}) {
    if (corpus.empty()) throw EmptyCorpus("prequential_run: empty corpus");
    if (!protocol || !protocol->frozen())
        throw ProtocolNotFrozen("prequential_run requires a frozen protocol");

    const std::string hash_before = protocol->version_hash();
    const long long reflector_calls_before = backend->calls(TemplateId::Reflector);

    std::vector<detail::TrajectoryOutcome> outcomes(corpus.size());
    int workers = std::max(1, opt.workers);
    if (workers == 1) {
        for (size_t i = 0; i < corpus.size(); ++i)
            outcomes[i] = detail::run_trajectory(corpus[i], protocol, backend, opt);
    } else {
        std::atomic<size_t> next{0};
        auto worker = [&]() {
            for (;;) {
                size_t i = next.fetch_add(1);
                if (i >= corpus.size()) break;
                outcomes[i] = detail::run_trajectory(corpus[i], protocol, backend, opt);
            }
        };
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }

    PrequentialResult result;
    result.lookahead_certified = true;
    for (auto& o : outcomes) {
        if (o.failed) {
            ++result.trajectories_failed;
            result.lookahead_certified = false;
            continue;
        }
        result.incidents += o.incidents;
        result.lookahead_certified = result.lookahead_certified && o.lookahead_ok;
        for (auto& t : o.traces) {
            result.trace_records.push_back(step_trace_to_json(t));
            result.traces.push_back(std::move(t));
        }
        result.trace_records.push_back(std::move(o.end_record));
    }

    if (protocol->version_hash() != hash_before)
        throw TraceError("frozen protocol mutated during prequential run");
    if (backend->calls(TemplateId::Reflector) != reflector_calls_before)
        throw TraceError("Reflector invoked during Phase II");
    result.protocol_hash = hash_before;

    result.report = compute_metrics(result.traces);
    result.report.trajectories = corpus.size();
    result.report.trajectories_failed = result.trajectories_failed;
    size_t skipped = 0;
    for (const auto& t : result.traces)
        if (!t.scored) ++skipped;
    // the final step of each trajectory has no next bundle and is never scored
    result.report.steps_skipped_empty_truth = skipped;
    return result;
}

}  // namespace trace
