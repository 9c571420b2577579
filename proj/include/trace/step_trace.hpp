#pragma once

#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "trace/common.hpp"

namespace trace {

enum class BundleType { Medications, Labs, Procedures };
enum class TriggerReason { None, Uncertainty, SafetyVocab, Both };
enum class AuditStatus { Pass, Fail, NotRun };
enum class RiskLevel { Low, High, NotRun };

inline std::string_view to_string(BundleType t) {
    switch (t) {
        case BundleType::Medications: return "Medications";
        case BundleType::Labs: return "Labs";
        case BundleType::Procedures: return "Procedures";
    }
    return "?";
}

inline std::string_view to_string(TriggerReason r) {
    switch (r) {
        case TriggerReason::None: return "None";
        case TriggerReason::Uncertainty: return "Uncertainty";
        case TriggerReason::SafetyVocab: return "SafetyVocab";
        case TriggerReason::Both: return "Both";
    }
    return "?";
}

inline std::string_view to_string(AuditStatus s) {
    switch (s) {
        case AuditStatus::Pass: return "Pass";
        case AuditStatus::Fail: return "Fail";
        case AuditStatus::NotRun: return "NotRun";
    }
    return "?";
}

inline std::string_view to_string(RiskLevel r) {
    switch (r) {
        case RiskLevel::Low: return "Low";
        case RiskLevel::High: return "High";
        case RiskLevel::NotRun: return "NotRun";
    }
    return "?";
}

/// Reasoner output for one timestep. uncertainty is -mean(token logprobs);
/// +infinity is the sentinel for "logprobs unavailable" and for abstentions.
struct Prediction {
    std::string thought;
    BundleType bundle_type = BundleType::Medications;
    std::vector<std::string> actions;    // at most 5 retained for scoring
    std::vector<std::string> citations;  // raw "R-.." / "S-.." ids as emitted
    double uncertainty = std::numeric_limits<double>::infinity();
    std::vector<double> raw_logprobs;
    bool abstained = false;
};

struct AuditVerdict {
    bool triggered = false;
    TriggerReason trigger_reason = TriggerReason::None;
    AuditStatus status = AuditStatus::NotRun;
    RiskLevel risk_level = RiskLevel::NotRun;
    std::string critique;
    std::optional<std::vector<std::string>> corrected_actions;  // present only on Fail
};

/// Auditable per-timestep record; the single source every metric reads from.
struct StepTrace {
    static constexpr int kSchemaVersion = 1;

    std::string stay_id;
    int t = 0;

    std::vector<std::string> activated_rule_ids;  // C_t
    bool router_llm_used = false;

    Prediction prediction;
    std::vector<std::string> final_actions;  // prediction.actions unless the Auditor corrected
    AuditVerdict verdict;

    std::vector<std::string> cited_rule_ids;  // citations resolved to protocol rule ids
    bool citation_valid = true;

    // scoring fields, filled by the prequential runner
    bool scored = false;
    std::string truth_category;  // "Medication" | "LabOrder" | "Procedure" when scored
    std::vector<std::string> truth_actions;
    std::optional<double> recall_at_5;
    std::optional<int> equivalence;

    std::map<std::string, int> prompt_tokens;  // per prompt section, at reason time
    int max_prompt_tokens = 0;                 // max over every backend call in the step
    std::string state_hash;                    // digest of the end-of-step Individual Protocol
    json state_snapshot;                       // the Individual Protocol itself
};

inline json uncertainty_to_json(double u) {
    if (std::isinf(u)) return json("inf");
    return json(u);
}

inline double uncertainty_from_json(const json& j) {
    if (j.is_string()) return std::numeric_limits<double>::infinity();
    return j.get<double>();
}

inline json prediction_to_json(const Prediction& p) {
    json j;
    j["thought"] = p.thought;
    j["bundle_type"] = std::string(to_string(p.bundle_type));
    j["actions"] = p.actions;
    j["citations"] = p.citations;
    j["uncertainty"] = uncertainty_to_json(p.uncertainty);
    j["raw_logprobs"] = p.raw_logprobs;
    j["abstained"] = p.abstained;
    return j;
}

inline json verdict_to_json(const AuditVerdict& v) {
    json j;
    j["triggered"] = v.triggered;
    j["trigger_reason"] = std::string(to_string(v.trigger_reason));
    j["status"] = std::string(to_string(v.status));
    j["risk_level"] = std::string(to_string(v.risk_level));
    j["critique"] = v.critique;
    if (v.corrected_actions) j["corrected_actions"] = *v.corrected_actions;
    return j;
}

inline json step_trace_to_json(const StepTrace& s) {
    json j;
    j["record"] = "step";
    j["schema_version"] = StepTrace::kSchemaVersion;
    j["stay_id"] = s.stay_id;
    j["t"] = s.t;
    j["activated_rule_ids"] = s.activated_rule_ids;
    j["router_llm_used"] = s.router_llm_used;
    j["prediction"] = prediction_to_json(s.prediction);
    j["final_actions"] = s.final_actions;
    j["verdict"] = verdict_to_json(s.verdict);
    j["cited_rule_ids"] = s.cited_rule_ids;
    j["citation_valid"] = s.citation_valid;
    j["scored"] = s.scored;
    if (s.scored) {
        j["truth_category"] = s.truth_category;
        j["truth_actions"] = s.truth_actions;
        if (s.recall_at_5) j["recall_at_5"] = *s.recall_at_5;
        if (s.equivalence) j["equivalence"] = *s.equivalence;
    }
    j["prompt_tokens"] = s.prompt_tokens;
    j["max_prompt_tokens"] = s.max_prompt_tokens;
    j["state_hash"] = s.state_hash;
    j["state"] = s.state_snapshot;
    return j;
}

namespace detail {

template <typename Enum>
Enum enum_from_string_or(std::string_view s, Enum fallback) {
    if constexpr (std::is_same_v<Enum, BundleType>) {
        if (s == "Medications") return BundleType::Medications;
        if (s == "Labs") return BundleType::Labs;
        if (s == "Procedures") return BundleType::Procedures;
    } else if constexpr (std::is_same_v<Enum, TriggerReason>) {
        if (s == "None") return TriggerReason::None;
        if (s == "Uncertainty") return TriggerReason::Uncertainty;
        if (s == "SafetyVocab") return TriggerReason::SafetyVocab;
        if (s == "Both") return TriggerReason::Both;
    } else if constexpr (std::is_same_v<Enum, AuditStatus>) {
        if (s == "Pass") return AuditStatus::Pass;
        if (s == "Fail") return AuditStatus::Fail;
        if (s == "NotRun") return AuditStatus::NotRun;
    } else if constexpr (std::is_same_v<Enum, RiskLevel>) {
        if (s == "Low") return RiskLevel::Low;
        if (s == "High") return RiskLevel::High;
        if (s == "NotRun") return RiskLevel::NotRun;
    }
    return fallback;
}

}  // namespace detail

inline StepTrace step_trace_from_json(const json& j) {
    StepTrace s;
    s.stay_id = j.at("stay_id").get<std::string>();
    s.t = j.at("t").get<int>();
    s.activated_rule_ids = j.at("activated_rule_ids").get<std::vector<std::string>>();
    s.router_llm_used = j.value("router_llm_used", false);
    const json& p = j.at("prediction");
    s.prediction.thought = p.value("thought", std::string{});
    s.prediction.bundle_type = detail::enum_from_string_or(
        p.value("bundle_type", std::string{}), BundleType::Medications);
    s.prediction.actions = p.at("actions").get<std::vector<std::string>>();
    s.prediction.citations = p.at("citations").get<std::vector<std::string>>();
    s.prediction.uncertainty = uncertainty_from_json(p.at("uncertainty"));
    s.prediction.raw_logprobs = p.value("raw_logprobs", std::vector<double>{});
    s.prediction.abstained = p.value("abstained", false);
    s.final_actions = j.at("final_actions").get<std::vector<std::string>>();
    const json& v = j.at("verdict");
    s.verdict.triggered = v.at("triggered").get<bool>();
    s.verdict.trigger_reason =
        detail::enum_from_string_or(v.value("trigger_reason", std::string{}), TriggerReason::None);
    s.verdict.status =
        detail::enum_from_string_or(v.value("status", std::string{}), AuditStatus::NotRun);
    s.verdict.risk_level =
        detail::enum_from_string_or(v.value("risk_level", std::string{}), RiskLevel::NotRun);
    s.verdict.critique = v.value("critique", std::string{});
    if (v.contains("corrected_actions"))
        s.verdict.corrected_actions = v.at("corrected_actions").get<std::vector<std::string>>();
    s.cited_rule_ids = j.value("cited_rule_ids", std::vector<std::string>{});
    s.citation_valid = j.value("citation_valid", true);
    s.scored = j.value("scored", false);
    if (s.scored) {
        s.truth_category = j.value("truth_category", std::string{});
        s.truth_actions = j.value("truth_actions", std::vector<std::string>{});
        if (j.contains("recall_at_5")) s.recall_at_5 = j.at("recall_at_5").get<double>();
        if (j.contains("equivalence")) s.equivalence = j.at("equivalence").get<int>();
    }
    if (j.contains("prompt_tokens"))
        s.prompt_tokens = j.at("prompt_tokens").get<std::map<std::string, int>>();
    s.max_prompt_tokens = j.value("max_prompt_tokens", 0);
    s.state_hash = j.value("state_hash", std::string{});
    if (j.contains("state")) s.state_snapshot = j.at("state");
    return s;
}

}  // namespace trace
