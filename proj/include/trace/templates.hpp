#pragma once

#include <map>
#include <string>

#include "trace/common.hpp"

namespace trace {

enum class TemplateId { Reflector, Router, Reasoner, Auditor, Steward, Judge };

inline std::string_view to_string(TemplateId id) {
    switch (id) {
        case TemplateId::Reflector: return "Reflector";
        case TemplateId::Router: return "Router";
        case TemplateId::Reasoner: return "Reasoner";
        case TemplateId::Auditor: return "Auditor";
        case TemplateId::Steward: return "Steward";
        case TemplateId::Judge: return "Judge";
    }
    return "?";
}

inline std::optional<TemplateId> template_id_from_string(std::string_view s) {
    if (s == "Reflector") return TemplateId::Reflector;
    if (s == "Router") return TemplateId::Router;
    if (s == "Reasoner") return TemplateId::Reasoner;
    if (s == "Auditor") return TemplateId::Auditor;
    if (s == "Steward") return TemplateId::Steward;
    if (s == "Judge") return TemplateId::Judge;
    return std::nullopt;
}

class UnknownTemplate : public TraceError {
public:
    explicit UnknownTemplate(const std::string& what) : TraceError(what) {}
};

class UnboundSlot : public TraceError {
public:
    explicit UnboundSlot(const std::string& slot) : TraceError("unbound template slot: " + slot) {}
};

// ---------------------------------------------------------------------------
// Shipped prompt texts. Slots use {{ name }} syntax and are substituted
// verbatim; everything else is emitted untouched.
// ---------------------------------------------------------------------------

inline constexpr const char* kReflectorTemplate =
    R"TPL(You are a Senior Medical Auditor responsible for improving institutional protocols.

[SCENARIO]
An AI clinical agent failed to predict the correct intervention for a patient.

Patient History:
{{ patient_history_text }}

Ground Truth Action:
{{ ground_truth_action }}

AI Prediction (Incorrect):
{{ ai_prediction }}

[TASK]
Analyze the gap. Why did the AI miss this?
- Was it missing medical knowledge?
- Was it missing an institutional rule (e.g., "IF Glucose > 180 THEN start insulin")?

[INSTRUCTION]
Propose a generalizable rule that would prevent this error in the future.
- The rule must be conditional: "IF [Trigger] THEN [Action]".
- Do not reference any patient identifiers.
- Assign a medical category label (e.g., "ENDOCRINE_MGMT", "SEPSIS", "RENAL").

[OUTPUT FORMAT]
Return ONLY a valid JSON object:
{
  "error_analysis": "Brief explanation of the failure mode.",
  "proposed_rule": {
    "category": "ENDOCRINE_MGMT",
    "trigger_condition": "Blood Glucose > 180 mg/dL",
    "action_directive": "Initiate sliding scale insulin protocol",
    "rule_text": "IF Glucose > 180 mg/dL AND patient is NPO, THEN start basal insulin."
  }
})TPL";

inline constexpr const char* kRouterTemplate =
    R"TPL(You are a Clinical Knowledge Router. Your goal is to select the most relevant
clinical protocols for the current situation.

[INPUT CONTEXT]
Active Patient State:
{{ patient_state_json }}

Recent Events (Last 6 hours):
{{ recent_events_text }}

Available Protocol Index:
{{ protocol_index_list }}

[INSTRUCTION]
Analyze the recent events and patient state for clinical triggers
(e.g., Lactate > 4, Hypotension, New admission).
Select up to 3 protocol IDs from the index that are critical for the immediate next steps.
If no specific protocol applies, return an empty list.

[OUTPUT FORMAT]
Return ONLY a valid JSON object:
{
  "reasoning": "Brief explanation of why these protocols are relevant.",
  "selected_protocol_ids": ["SEPSIS_01", "RENAL_03"]
})TPL";

inline constexpr const char* kReasonerTemplate =
    R"TPL(You are TRACE, an expert clinical decision agent. Predict the next logical bundle
of clinical actions.

[MEMORY BANK]
Institutional Rules (Global Protocol):
{{ selected_rules_text }}

Patient Tracker (Individual Protocol):
{{ patient_state_json }}

[SCENARIO]
Patient event history:
{{ event_stream_history }}

[TASK]
Predict the next Clinical Event Bundle. Use the following heuristic:
- If the last bundle was primarily Observation (labs/vitals), the next is often Decision (meds/procedures).
- If the last bundle was Intervention, the next is often Monitoring (labs).

[CONSTRAINTS]
Citations Required:
You MUST cite a Rule ID (e.g., [R-01]) or a State ID (e.g., [S-05]) for every major decision.

Precision:
Use specific medication names and dose categories (e.g., "low-dose norepinephrine"),
not generic classes (e.g., "vasopressors").

[OUTPUT FORMAT]
Return ONLY a valid JSON object:
{
  "thought_process": "Short rationale grounded in cited facts/rules.",
  "next_bundle_type": "MEDICATIONS" | "LABS" | "PROCEDURES",
  "predicted_actions": [
    "Order 1L crystalloid bolus",
    "Start broad-spectrum antibiotics"
  ],
  "citations": ["S-01", "R-01"]
})TPL";

inline constexpr const char* kAuditorTemplate =
    R"TPL(You are a Clinical Safety Sentinel. Review the proposed AI decision for safety violations.

[CONTEXT]
Proposed Actions:
{{ proposed_actions_list }}

Patient Contraindications / Problems:
{{ active_problems_list }}

Relevant Rules:
{{ active_rules_text }}

[CHECKLIST]
- Contraindications: Does the patient have a condition that forbids the action (e.g., renal failure)?
- Rule adherence: Does the action violate an institutional rule?
- Hallucination: Does the AI cite a patient fact that is not present in the provided context?

[OUTPUT FORMAT]
Return ONLY a valid JSON object:
{
  "status": "PASS" | "FAIL",
  "risk_level": "LOW" | "HIGH",
  "critique": "If FAIL, explain the violation and reference the conflicting rule/state.",
  "corrected_action": "If FAIL, propose a safer alternative; otherwise leave empty."
})TPL";

inline constexpr const char* kStewardTemplate =
    R"TPL(You are the State Manager. Update the structured patient record based on new raw events.

[CURRENT STATE]
{{ current_state_json }}

[NEW RAW EVENTS]
{{ new_event_bundle_text }}

[INSTRUCTION]
Perform a structured state update (mitosis):
- Diagnoses: Add new confirmed diagnoses; move resolved ones to history.
- Medications: Add new starts; if a medication is stopped/discontinued, remove it from current meds.
- Trends: Update key lab/vital trends (e.g., creatinine, lactate).

[OUTPUT FORMAT]
Return ONLY the updated JSON state object. Do not summarize.
Be precise with values and maintain a consistent schema.)TPL";

inline constexpr const char* kJudgeTemplate =
    R"TPL(You are a senior clinician grading a proposed care plan against the care that was actually delivered.

[CONTEXT]
{{ context_text }}

Proposed Plan:
{{ predicted_actions_list }}

Delivered Care:
{{ reference_actions_list }}

[TASK]
Rate the clinical acceptability of the proposed plan on a 1-5 scale, where 5
means clinically equivalent or a reasonable alternative and 1 means unsafe or
clearly inappropriate. Reasonable alternatives to the delivered care deserve
high scores even when the exact orders differ.

[OUTPUT FORMAT]
Return ONLY a valid JSON object:
{
  "score": 3,
  "rationale": "Brief justification."
})TPL";

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Substitute {{ name }} slots with their bindings, verbatim. A slot without
/// a binding is an error; single braces (the JSON examples in the templates)
/// pass through untouched.
inline std::string render_template_text(const std::string& template_text,
                                        const std::map<std::string, std::string>& bindings) {
    std::string out;
    out.reserve(template_text.size());
    size_t pos = 0;
    while (pos < template_text.size()) {
        size_t open = template_text.find("{{", pos);
        if (open == std::string::npos) {
            out.append(template_text, pos, std::string::npos);
            break;
        }
        size_t close = template_text.find("}}", open + 2);
        if (close == std::string::npos) {
            out.append(template_text, pos, std::string::npos);
            break;
        }
        std::string name = trim(template_text.substr(open + 2, close - open - 2));
        bool is_ident = !name.empty();
        for (char c : name)
            if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_') is_ident = false;
        if (!is_ident) {
            // not a slot; emit the first brace and rescan
            out.append(template_text, pos, open + 1 - pos);
            pos = open + 1;
            continue;
        }
        out.append(template_text, pos, open - pos);
        auto it = bindings.find(name);
        if (it == bindings.end()) throw UnboundSlot(name);
        out += it->second;
        pos = close + 2;
    }
    return out;
}

/// The prompt texts in use for a run: shipped defaults, optionally overridden
/// per template by files named <template>.txt in a directory.
class TemplateSet {
public:
    TemplateSet() {
        texts_[TemplateId::Reflector] = kReflectorTemplate;
        texts_[TemplateId::Router] = kRouterTemplate;
        texts_[TemplateId::Reasoner] = kReasonerTemplate;
        texts_[TemplateId::Auditor] = kAuditorTemplate;
        texts_[TemplateId::Steward] = kStewardTemplate;
        texts_[TemplateId::Judge] = kJudgeTemplate;
    }

    static TemplateSet with_overrides(const std::filesystem::path& dir) {
        TemplateSet set;
        for (auto& [id, text] : set.texts_) {
            auto path = dir / (to_lower(std::string(to_string(id))) + ".txt");
            if (std::filesystem::exists(path)) text = read_file(path);
        }
        return set;
    }

    const std::string& text(TemplateId id) const {
        auto it = texts_.find(id);
        if (it == texts_.end())
            throw UnknownTemplate("no template for id " + std::string(to_string(id)));
        return it->second;
    }

    std::string render(TemplateId id, const std::map<std::string, std::string>& bindings) const {
        return render_template_text(text(id), bindings);
    }

private:
    std::map<TemplateId, std::string> texts_;
};

inline std::string render_template(TemplateId id,
                                   const std::map<std::string, std::string>& bindings) {
    static const TemplateSet defaults;
    return defaults.render(id, bindings);
}

}  // namespace trace
