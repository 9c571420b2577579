#pragma once

#include <cstring>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "trace/bundler.hpp"
#include "trace/events.hpp"

namespace trace {

class ProtocolFrozen : public TraceError {
public:
    explicit ProtocolFrozen(const std::string& what) : TraceError(what) {}
};

class DuplicateRuleId : public TraceError {
public:
    explicit DuplicateRuleId(const std::string& id) : TraceError("duplicate rule_id: " + id) {}
};

class MalformedRule : public TraceError {
public:
    explicit MalformedRule(const std::string& what) : TraceError(what) {}
};

// ---------------------------------------------------------------------------
// Trigger predicates
// ---------------------------------------------------------------------------

enum class Cmp { Lt, Gt, Le, Ge, Eq, Present };

/// One atomic comparison from a trigger condition: either a numeric test
/// against a lab value ("Lactate > 4") or a bare term whose presence in the
/// context is the trigger ("Hypotension").
struct TriggerPredicate {
    std::string term;
    Cmp cmp = Cmp::Present;
    std::optional<double> threshold;
};

inline bool compare_value(double value, Cmp cmp, double threshold) {
    switch (cmp) {
        case Cmp::Lt: return value < threshold;
        case Cmp::Gt: return value > threshold;
        case Cmp::Le: return value <= threshold;
        case Cmp::Ge: return value >= threshold;
        case Cmp::Eq: return value == threshold;
        case Cmp::Present: return false;
    }
    return false;
}

namespace detail {

/// Case-insensitive split on a whole-word keyword ("OR", "AND").
inline std::vector<std::string> split_keyword(const std::string& s, const std::string& kw) {
    std::vector<std::string> parts;
    std::string low = to_lower(s), k = to_lower(kw);
    size_t start = 0, pos = 0;
    while ((pos = low.find(k, pos)) != std::string::npos) {
        bool lb = pos == 0 || !std::isalnum(static_cast<unsigned char>(low[pos - 1]));
        size_t after = pos + k.size();
        bool rb = after >= low.size() || !std::isalnum(static_cast<unsigned char>(low[after]));
        if (lb && rb) {
            parts.push_back(s.substr(start, pos - start));
            start = after;
            pos = after;
        } else {
            ++pos;
        }
    }
    parts.push_back(s.substr(start));
    return parts;
}

inline std::optional<TriggerPredicate> parse_numeric_atom(const std::string& atom) {
    struct Op {
        const char* text;
        Cmp cmp;
    };
    // Multi-character operators first; the UTF-8 forms map onto Le/Ge.
    static const Op ops[] = {{"<=", Cmp::Le}, {">=", Cmp::Ge}, {"\xE2\x89\xA4", Cmp::Le},
                             {"\xE2\x89\xA5", Cmp::Ge}, {"<", Cmp::Lt}, {">", Cmp::Gt},
                             {"=", Cmp::Eq}};
    size_t best = std::string::npos;
    const Op* best_op = nullptr;
    for (const auto& op : ops) {
        size_t pos = atom.find(op.text);
        if (pos != std::string::npos && (best == std::string::npos || pos < best)) {
            best = pos;
            best_op = &op;
        }
    }
    if (!best_op) return std::nullopt;
    std::string term = trim(atom.substr(0, best));
    std::string rest = trim(atom.substr(best + std::strlen(best_op->text)));
    if (term.empty() || rest.empty()) return std::nullopt;
    char* end = nullptr;
    double v = std::strtod(rest.c_str(), &end);
    if (end == rest.c_str()) return std::nullopt;  // no leading number; unit-only or prose
    TriggerPredicate p;
    p.term = term;
    p.cmp = best_op->cmp;
    p.threshold = v;
    return p;
}

}  // namespace detail

/// Parse a free-text trigger condition into OR-of-AND clauses of atomic
/// predicates. Atoms that carry no parseable comparison degrade to
/// term-presence predicates; an entirely unsplittable condition degrades to
/// one presence predicate over the whole string.
inline std::vector<std::vector<TriggerPredicate>> parse_trigger_condition(
    const std::string& condition) {
    std::vector<std::vector<TriggerPredicate>> clauses;
    for (const auto& clause_text : detail::split_keyword(condition, "OR")) {
        std::vector<TriggerPredicate> clause;
        for (const auto& and_part : detail::split_keyword(clause_text, "AND")) {
            for (const auto& atom_raw : split(and_part, ',')) {
                std::string atom = trim(atom_raw);
                if (atom.empty()) continue;
                if (auto p = detail::parse_numeric_atom(atom)) {
                    clause.push_back(std::move(*p));
                } else {
                    clause.push_back(TriggerPredicate{atom, Cmp::Present, std::nullopt});
                }
            }
        }
        if (!clause.empty()) clauses.push_back(std::move(clause));
    }
    if (clauses.empty()) {
        std::string whole = trim(condition);
        if (!whole.empty()) clauses.push_back({TriggerPredicate{whole, Cmp::Present, std::nullopt}});
    }
    return clauses;
}

// ---------------------------------------------------------------------------
// Global Protocol
// ---------------------------------------------------------------------------

/// One institutional IF/THEN rule of the Global Protocol.
struct GlobalRule {
    std::string rule_id;
    std::string category;
    std::string trigger_condition;
    std::string action_directive;
    std::string rule_text;
    std::vector<std::vector<TriggerPredicate>> clauses;  // derived from trigger_condition

    std::vector<const TriggerPredicate*> atomic_predicates() const {
        std::vector<const TriggerPredicate*> out;
        for (const auto& clause : clauses)
            for (const auto& p : clause) out.push_back(&p);
        return out;
    }
};

inline bool has_if_then_shape(const std::string& rule_text) {
    return detail::split_keyword(rule_text, "if").size() > 1 &&
           detail::split_keyword(rule_text, "then").size() > 1;
}

inline GlobalRule make_rule(std::string rule_id, std::string category,
                            std::string trigger_condition, std::string action_directive,
                            std::string rule_text) {
    GlobalRule r;
    r.rule_id = std::move(rule_id);
    r.category = std::move(category);
    r.trigger_condition = std::move(trigger_condition);
    r.action_directive = std::move(action_directive);
    r.rule_text = std::move(rule_text);
    r.clauses = parse_trigger_condition(r.trigger_condition);
    return r;
}

inline json rule_to_json(const GlobalRule& r) {
    return json{{"rule_id", r.rule_id},
                {"category", r.category},
                {"trigger_condition", r.trigger_condition},
                {"action_directive", r.action_directive},
                {"rule_text", r.rule_text}};
}

inline GlobalRule rule_from_json(const json& j) {
    return make_rule(j.at("rule_id").get<std::string>(), j.value("category", std::string{}),
                     j.value("trigger_condition", std::string{}),
                     j.value("action_directive", std::string{}),
                     j.at("rule_text").get<std::string>());
}

/// The institutional playbook P_G: an ordered, trigger-keyed rule store.
/// Mutable while Phase I grows it; frozen (immutable) during inference.
class GlobalProtocol {
public:
    void append_rule(GlobalRule rule) {
        if (frozen_) throw ProtocolFrozen("append_rule on frozen protocol");
        if (rule.rule_id.empty()) throw MalformedRule("empty rule_id");
        if (!has_if_then_shape(rule.rule_text))
            throw MalformedRule("rule_text lacks IF/THEN shape: " + rule.rule_text);
        if (by_id_.count(rule.rule_id)) throw DuplicateRuleId(rule.rule_id);
        by_id_[rule.rule_id] = rules_.size();
        rules_.push_back(std::move(rule));
    }

    void freeze() { frozen_ = true; }
    bool frozen() const { return frozen_; }
    size_t size() const { return rules_.size(); }
    bool empty() const { return rules_.empty(); }
    const std::vector<GlobalRule>& rules() const { return rules_; }

    const GlobalRule* find(const std::string& rule_id) const {
        auto it = by_id_.find(rule_id);
        return it == by_id_.end() ? nullptr : &rules_[it->second];
    }

    /// Content digest over the canonical rule serialization; changes iff the
    /// rule set changes.
    std::string version_hash() const {
        std::string canon;
        for (const auto& r : rules_) {
            canon += rule_to_json(r).dump();
            canon += '\n';
        }
        return digest_hex(canon);
    }

    json to_store_json() const {
        json j;
        j["version_hash"] = version_hash();
        j["frozen"] = frozen_;
        json rules = json::array();
        for (const auto& r : rules_) rules.push_back(rule_to_json(r));
        j["rules"] = std::move(rules);
        return j;
    }

    static GlobalProtocol from_store_json(const json& j) {
        GlobalProtocol p;
        for (const auto& rj : j.at("rules")) p.append_rule(rule_from_json(rj));
        if (j.contains("version_hash")) {
            std::string stored = j.at("version_hash").get<std::string>();
            if (stored != p.version_hash())
                throw TraceError("protocol store digest mismatch (expected " + stored + ")");
        }
        if (j.value("frozen", false)) p.freeze();
        return p;
    }

    /// Frozen copy for use inside a trajectory while the original keeps
    /// growing between trajectories.
    GlobalProtocol frozen_snapshot() const {
        GlobalProtocol p;
        p.rules_ = rules_;
        p.by_id_ = by_id_;
        p.frozen_ = true;
        return p;
    }

private:
    std::vector<GlobalRule> rules_;
    std::unordered_map<std::string, size_t> by_id_;
    bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Individual Protocol
// ---------------------------------------------------------------------------

struct HistoryEntry {
    std::string item;
    std::string resolved_at;

    bool operator==(const HistoryEntry&) const = default;
};

/// The structured patient state P_I,t. All lists are deduplicated under
/// normalized comparison; insertion order is preserved.
class IndividualProtocol {
public:
    const std::vector<std::string>& active_problems() const { return active_problems_; }
    const std::vector<std::string>& current_meds() const { return current_meds_; }
    const std::vector<std::string>& procedures() const { return procedures_; }
    const std::vector<std::string>& trends() const { return trends_; }
    const std::vector<HistoryEntry>& history() const { return history_; }

    bool add_problem(std::string s) { return add_unique(active_problems_, std::move(s)); }
    bool add_med(std::string s) { return add_unique(current_meds_, std::move(s)); }
    bool add_procedure(std::string s) { return add_unique(procedures_, std::move(s)); }
    bool add_trend(std::string s) { return add_unique(trends_, std::move(s)); }

    void add_history(std::string item, std::string resolved_at) {
        for (const auto& h : history_)
            if (normalize(h.item) == normalize(item) && h.resolved_at == resolved_at) return;
        history_.push_back({std::move(item), std::move(resolved_at)});
    }

    /// Remove every current-med entry whose normalized text contains the
    /// drug name. Returns the removed entries.
    std::vector<std::string> remove_med(const std::string& drug) {
        std::string needle = normalize(drug);
        std::vector<std::string> removed;
        if (needle.empty()) return removed;
        auto it = current_meds_.begin();
        while (it != current_meds_.end()) {
            if (normalize(*it).find(needle) != std::string::npos) {
                removed.push_back(*it);
                it = current_meds_.erase(it);
            } else {
                ++it;
            }
        }
        return removed;
    }

    bool has_med(const std::string& drug) const {
        std::string needle = normalize(drug);
        for (const auto& m : current_meds_)
            if (normalize(m).find(needle) != std::string::npos) return true;
        return false;
    }

    bool empty() const {
        return active_problems_.empty() && current_meds_.empty() && procedures_.empty() &&
               trends_.empty() && history_.empty();
    }

    bool operator==(const IndividualProtocol&) const = default;

    json to_json() const {
        json j;
        j["active_problems"] = active_problems_;
        j["current_meds"] = current_meds_;
        j["procedures"] = procedures_;
        j["trends"] = trends_;
        json h = json::array();
        for (const auto& e : history_) h.push_back({{"item", e.item}, {"resolved_at", e.resolved_at}});
        j["history"] = std::move(h);
        return j;
    }

    /// Parse a state document. "trajectory" is accepted as an alias for
    /// "trends". Keys absent from the document fall back to `prior` so a
    /// partial update never drops unmentioned items.
    static IndividualProtocol from_json(const json& j,
                                        const IndividualProtocol& prior = IndividualProtocol{}) {
        IndividualProtocol out;
        auto load_list = [&](const char* key, const char* alias,
                             const std::vector<std::string>& fallback,
                             auto add) {
            const json* arr = nullptr;
            if (j.contains(key) && j.at(key).is_array()) arr = &j.at(key);
            else if (alias && j.contains(alias) && j.at(alias).is_array()) arr = &j.at(alias);
            if (!arr) {
                for (const auto& s : fallback) add(s);
                return;
            }
            for (const auto& v : *arr) {
                if (v.is_string()) add(v.get<std::string>());
                else if (!v.is_null()) add(v.dump());
            }
        };
        load_list("active_problems", nullptr, prior.active_problems_,
                  [&](std::string s) { out.add_problem(std::move(s)); });
        load_list("current_meds", nullptr, prior.current_meds_,
                  [&](std::string s) { out.add_med(std::move(s)); });
        load_list("procedures", nullptr, prior.procedures_,
                  [&](std::string s) { out.add_procedure(std::move(s)); });
        load_list("trends", "trajectory", prior.trends_,
                  [&](std::string s) { out.add_trend(std::move(s)); });
        if (j.contains("history") && j.at("history").is_array()) {
            for (const auto& v : j.at("history")) {
                if (v.is_object())
                    out.add_history(v.value("item", std::string{}),
                                    v.value("resolved_at", std::string{}));
                else if (v.is_string())
                    out.add_history(v.get<std::string>(), "");
            }
        } else {
            out.history_ = prior.history_;
        }
        return out;
    }

    /// Items addressable by state ids [S-1..S-n] in prompts: problems, meds,
    /// procedures, trends, in serialization order.
    std::vector<std::string> citable_items() const {
        std::vector<std::string> out;
        out.insert(out.end(), active_problems_.begin(), active_problems_.end());
        out.insert(out.end(), current_meds_.begin(), current_meds_.end());
        out.insert(out.end(), procedures_.begin(), procedures_.end());
        out.insert(out.end(), trends_.begin(), trends_.end());
        return out;
    }

private:
    bool add_unique(std::vector<std::string>& list, std::string s) {
        std::string key = normalize(s);
        if (key.empty()) return false;
        for (const auto& e : list)
            if (normalize(e) == key) return false;
        list.push_back(std::move(s));
        return true;
    }

    std::vector<std::string> active_problems_;
    std::vector<std::string> current_meds_;
    std::vector<std::string> procedures_;
    std::vector<std::string> trends_;
    std::vector<HistoryEntry> history_;
};

/// Canonical text form: stable key order, stable list order.
inline std::string serialize_individual(const IndividualProtocol& ind) {
    return ind.to_json().dump();
}

inline IndividualProtocol parse_individual(const std::string& text) {
    return IndividualProtocol::from_json(json::parse(text));
}

// ---------------------------------------------------------------------------
// Trigger matching
// ---------------------------------------------------------------------------

/// Flattened predicate table over a protocol, built once and reused across
/// bundles. Candidate semantics: a rule matches when ANY of its atomic
/// predicates is satisfied — numeric predicates against lab values in the
/// bundle, term predicates as case-insensitive substrings of any rendered
/// event line, active problem, or current med.
class TriggerIndex {
public:
    explicit TriggerIndex(const GlobalProtocol& protocol) : protocol_(&protocol) {
        const auto& rules = protocol.rules();
        for (size_t i = 0; i < rules.size(); ++i) {
            for (const auto* p : rules[i].atomic_predicates()) {
                if (p->cmp != Cmp::Present && p->threshold) {
                    numeric_.push_back({normalize(p->term), p->cmp, *p->threshold, i});
                } else {
                    std::string needle = normalize(p->term);
                    if (!needle.empty()) terms_.push_back({std::move(needle), i});
                }
            }
        }
    }

    std::vector<std::string> match(const EventBundle& bundle,
                                   const IndividualProtocol& individual) const {
        const auto& rules = protocol_->rules();
        std::vector<char> hit(rules.size(), 0);

        for (const auto& e : bundle.events) {
            if (e.kind != EventKind::LabResult) continue;
            const auto& lab = std::get<LabPayload>(e.payload);
            std::string analyte = normalize(lab.analyte);
            for (const auto& n : numeric_) {
                if (hit[n.rule]) continue;
                if (analyte_matches(n.term, analyte) && compare_value(lab.value, n.cmp, n.threshold))
                    hit[n.rule] = 1;
            }
        }

        if (!terms_.empty()) {
            std::vector<std::string> haystacks;
            for (const auto& e : bundle.events) haystacks.push_back(normalize(e.rendered));
            for (const auto& s : individual.active_problems()) haystacks.push_back(normalize(s));
            for (const auto& s : individual.current_meds()) haystacks.push_back(normalize(s));
            for (const auto& t : terms_) {
                if (hit[t.rule]) continue;
                for (const auto& h : haystacks) {
                    if (h.find(t.needle) != std::string::npos) {
                        hit[t.rule] = 1;
                        break;
                    }
                }
            }
        }

        std::vector<std::string> out;
        for (size_t i = 0; i < rules.size(); ++i)
            if (hit[i]) out.push_back(rules[i].rule_id);
        return out;
    }

    static bool analyte_matches(const std::string& term_norm, const std::string& analyte_norm) {
        if (term_norm.empty() || analyte_norm.empty()) return false;
        return term_norm == analyte_norm ||
               term_norm.find(analyte_norm) != std::string::npos ||
               analyte_norm.find(term_norm) != std::string::npos;
    }

private:
    struct NumericEntry {
        std::string term;
        Cmp cmp;
        double threshold;
        size_t rule;
    };
    struct TermEntry {
        std::string needle;
        size_t rule;
    };

    const GlobalProtocol* protocol_;
    std::vector<NumericEntry> numeric_;
    std::vector<TermEntry> terms_;
};

/// Deterministic candidate prefilter; output ordered by rule insertion order.
inline std::vector<std::string> match_triggers(const EventBundle& bundle,
                                               const IndividualProtocol& individual,
                                               const GlobalProtocol& protocol) {
    if (protocol.empty()) return {};
    return TriggerIndex(protocol).match(bundle, individual);
}

// ---------------------------------------------------------------------------
// Inference state
// ---------------------------------------------------------------------------

struct MedOrder {
    std::string drug;
    MedPhase phase;
};

struct BufferEntry {
    std::string text;
    int tokens = 0;
    std::vector<MedOrder> med_orders;  // structured orders carried for the Mitosis post-pass
};

/// S_t = (P_G, P_I,t, E_buff): the bounded context carried across timesteps.
struct InferenceState {
    std::shared_ptr<const GlobalProtocol> global;
    IndividualProtocol individual;
    std::vector<BufferEntry> buffer;
    long long buffer_tokens = 0;
};

inline void buffer_push(InferenceState& state, std::string text, int tokens,
                        std::vector<MedOrder> med_orders = {}) {
    if (tokens < 0) throw TraceError("buffer_push: negative token count");
    state.buffer.push_back({std::move(text), tokens, std::move(med_orders)});
    state.buffer_tokens += tokens;
}

inline std::vector<MedOrder> med_orders_of(const EventBundle& bundle) {
    std::vector<MedOrder> out;
    for (const auto& e : bundle.events) {
        if (e.kind == EventKind::MedicationStart)
            out.push_back({std::get<MedicationPayload>(e.payload).drug, MedPhase::Start});
        else if (e.kind == EventKind::MedicationStop)
            out.push_back({std::get<MedicationPayload>(e.payload).drug, MedPhase::Stop});
    }
    return out;
}

}  // namespace trace
