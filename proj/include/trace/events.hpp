#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>

#include "trace/common.hpp"

namespace trace {

enum class EventKind { Diagnosis, MedicationStart, MedicationStop, LabResult, Procedure };

/// Low/Normal/High relative to the reference range. Unknown is an internal
/// fourth state for labs that arrive without a reference range; it renders as
/// "(No Ref)" and never surfaces through discretize_lab().
enum class LabCategory { Low, Normal, High, Unknown };

enum class MedPhase { Start, Stop };

class NonFiniteValue : public TraceError {
public:
    explicit NonFiniteValue(const std::string& what) : TraceError(what) {}
};

inline std::string_view to_string(EventKind k) {
    switch (k) {
        case EventKind::Diagnosis: return "Diagnosis";
        case EventKind::MedicationStart: return "MedicationStart";
        case EventKind::MedicationStop: return "MedicationStop";
        case EventKind::LabResult: return "LabResult";
        case EventKind::Procedure: return "Procedure";
    }
    return "?";
}

inline std::optional<EventKind> event_kind_from_string(std::string_view s) {
    if (s == "Diagnosis") return EventKind::Diagnosis;
    if (s == "MedicationStart") return EventKind::MedicationStart;
    if (s == "MedicationStop") return EventKind::MedicationStop;
    if (s == "LabResult") return EventKind::LabResult;
    if (s == "Procedure") return EventKind::Procedure;
    return std::nullopt;
}

inline std::string_view to_string(LabCategory c) {
    switch (c) {
        case LabCategory::Low: return "Low";
        case LabCategory::Normal: return "Normal";
        case LabCategory::High: return "High";
        case LabCategory::Unknown: return "Unknown";
    }
    return "?";
}

inline std::optional<LabCategory> lab_category_from_string(std::string_view s) {
    if (s == "Low") return LabCategory::Low;
    if (s == "Normal") return LabCategory::Normal;
    if (s == "High") return LabCategory::High;
    if (s == "Unknown") return LabCategory::Unknown;
    return std::nullopt;
}

/// Low iff value < ref_low, High iff value > ref_high, Normal otherwise
/// (both boundaries inclusive-Normal).
inline LabCategory discretize_lab(double value, double ref_low, double ref_high) {
    if (!std::isfinite(value) || !std::isfinite(ref_low) || !std::isfinite(ref_high))
        throw NonFiniteValue("discretize_lab: non-finite input");
    if (ref_low > ref_high) throw TraceError("discretize_lab: ref_low > ref_high");
    if (value < ref_low) return LabCategory::Low;
    if (value > ref_high) return LabCategory::High;
    return LabCategory::Normal;
}

struct LabPayload {
    std::string analyte;
    double value = 0.0;
    std::optional<double> ref_low;
    std::optional<double> ref_high;
    LabCategory category = LabCategory::Unknown;
};

struct MedicationPayload {
    std::string drug;
    std::string dose;   // free-form dose + unit
    std::string route;
    MedPhase phase = MedPhase::Start;
};

/// Diagnoses and procedures: normalized code plus textual description.
struct CodedPayload {
    std::string code;
    std::string description;
};

struct ClinicalEvent {
    EventKind kind = EventKind::LabResult;
    std::int64_t timestamp = 0;  // UTC seconds
    std::string stay_id;
    std::variant<LabPayload, MedicationPayload, CodedPayload> payload;
    std::string rendered;
};

/// Deterministic single-line text form of an event.
inline std::string render_event(const ClinicalEvent& e) {
    switch (e.kind) {
        case EventKind::LabResult: {
            const auto& p = std::get<LabPayload>(e.payload);
            std::string cat = p.category == LabCategory::Unknown
                                  ? std::string("No Ref")
                                  : std::string(to_string(p.category));
            return p.analyte + ": " + fmt_decimal(p.value) + " (" + cat + ")";
        }
        case EventKind::MedicationStart: {
            const auto& p = std::get<MedicationPayload>(e.payload);
            std::string out = "Start " + p.drug;
            if (!p.dose.empty()) out += " " + p.dose;
            if (!p.route.empty()) out += " " + p.route;
            return out;
        }
        case EventKind::MedicationStop: {
            const auto& p = std::get<MedicationPayload>(e.payload);
            return "Stop " + p.drug;
        }
        case EventKind::Diagnosis:
        case EventKind::Procedure: {
            const auto& p = std::get<CodedPayload>(e.payload);
            return p.description.empty() ? p.code : p.description;
        }
    }
    return "";
}

inline ClinicalEvent make_lab_event(std::string stay_id, std::int64_t ts, std::string analyte,
                                    double value, std::optional<double> ref_low,
                                    std::optional<double> ref_high) {
    if (!std::isfinite(value)) throw NonFiniteValue("lab value non-finite");
    ClinicalEvent e;
    e.kind = EventKind::LabResult;
    e.timestamp = ts;
    e.stay_id = std::move(stay_id);
    LabPayload p;
    p.analyte = std::move(analyte);
    p.value = value;
    p.ref_low = ref_low;
    p.ref_high = ref_high;
    p.category = (ref_low && ref_high) ? discretize_lab(value, *ref_low, *ref_high)
                                       : LabCategory::Unknown;
    e.payload = std::move(p);
    e.rendered = render_event(e);
    return e;
}

inline ClinicalEvent make_med_event(std::string stay_id, std::int64_t ts, MedPhase phase,
                                    std::string drug, std::string dose = "",
                                    std::string route = "") {
    ClinicalEvent e;
    e.kind = phase == MedPhase::Start ? EventKind::MedicationStart : EventKind::MedicationStop;
    e.timestamp = ts;
    e.stay_id = std::move(stay_id);
    e.payload = MedicationPayload{std::move(drug), std::move(dose), std::move(route), phase};
    e.rendered = render_event(e);
    return e;
}

inline ClinicalEvent make_coded_event(std::string stay_id, std::int64_t ts, EventKind kind,
                                      std::string code, std::string description) {
    ClinicalEvent e;
    e.kind = kind;
    e.timestamp = ts;
    e.stay_id = std::move(stay_id);
    e.payload = CodedPayload{std::move(code), std::move(description)};
    e.rendered = render_event(e);
    return e;
}

// ---------------------------------------------------------------------------
// JSON codec (events JSONL)
// ---------------------------------------------------------------------------

inline json event_to_json(const ClinicalEvent& e) {
    json j;
    j["stay_id"] = e.stay_id;
    j["kind"] = std::string(to_string(e.kind));
    j["timestamp"] = e.timestamp;
    json p;
    switch (e.kind) {
        case EventKind::LabResult: {
            const auto& lp = std::get<LabPayload>(e.payload);
            p["analyte"] = lp.analyte;
            p["value"] = lp.value;
            if (lp.ref_low) p["ref_low"] = *lp.ref_low;
            if (lp.ref_high) p["ref_high"] = *lp.ref_high;
            p["category"] = std::string(to_string(lp.category));
            break;
        }
        case EventKind::MedicationStart:
        case EventKind::MedicationStop: {
            const auto& mp = std::get<MedicationPayload>(e.payload);
            p["drug"] = mp.drug;
            p["dose"] = mp.dose;
            p["route"] = mp.route;
            break;
        }
        case EventKind::Diagnosis:
        case EventKind::Procedure: {
            const auto& cp = std::get<CodedPayload>(e.payload);
            p["code"] = cp.code;
            p["description"] = cp.description;
            break;
        }
    }
    j["payload"] = std::move(p);
    j["rendered"] = e.rendered;
    return j;
}

inline ClinicalEvent event_from_json(const json& j) {
    auto kind = event_kind_from_string(j.at("kind").get<std::string>());
    if (!kind) throw TraceError("unknown event kind: " + j.at("kind").dump());
    std::string stay = j.at("stay_id").get<std::string>();
    std::int64_t ts = j.at("timestamp").get<std::int64_t>();
    const json& p = j.at("payload");
    switch (*kind) {
        case EventKind::LabResult: {
            std::optional<double> lo, hi;
            if (p.contains("ref_low")) lo = p.at("ref_low").get<double>();
            if (p.contains("ref_high")) hi = p.at("ref_high").get<double>();
            return make_lab_event(std::move(stay), ts, p.at("analyte").get<std::string>(),
                                  p.at("value").get<double>(), lo, hi);
        }
        case EventKind::MedicationStart:
        case EventKind::MedicationStop:
            return make_med_event(std::move(stay), ts,
                                  *kind == EventKind::MedicationStart ? MedPhase::Start
                                                                      : MedPhase::Stop,
                                  p.at("drug").get<std::string>(),
                                  p.value("dose", std::string{}), p.value("route", std::string{}));
        case EventKind::Diagnosis:
        case EventKind::Procedure:
            return make_coded_event(std::move(stay), ts, *kind, p.value("code", std::string{}),
                                    p.value("description", std::string{}));
    }
    throw TraceError("unreachable event kind");
}

}  // namespace trace
