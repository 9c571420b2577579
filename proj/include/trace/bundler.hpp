#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "trace/events.hpp"

namespace trace {

class UnsortedInput : public TraceError {
public:
    explicit UnsortedInput(const std::string& what) : TraceError(what) {}
};

class EmptyCorpus : public TraceError {
public:
    explicit EmptyCorpus(const std::string& what) : TraceError(what) {}
};

/// All events coalesced within one window; the atomic timestep E_t.
struct EventBundle {
    int index = 0;
    std::int64_t window_start = 0;
    std::vector<ClinicalEvent> events;
    std::optional<int> preceding_gap_hours;  // set only when the silent gap exceeds the threshold
};

/// Named lab panels ("CMP", "BMP", ...) whose all-Normal results are
/// aggregated into a single line. Panel composition is institutional and
/// comes from config; analytes are compared in normalized form.
class PanelConfig {
public:
    PanelConfig() = default;

    static PanelConfig from_json(const json& j) {
        PanelConfig cfg;
        for (const auto& [panel, analytes] : j.items()) {
            std::vector<std::string> members;
            for (const auto& a : analytes) members.push_back(normalize(a.get<std::string>()));
            cfg.panels_.emplace_back(panel, std::move(members));
        }
        return cfg;
    }

    static PanelConfig defaults() {
        json j = {
            {"BMP",
             {"Sodium", "Potassium", "Chloride", "Bicarbonate", "BUN", "Creatinine", "Glucose",
              "Calcium"}},
            {"CMP",
             {"Sodium", "Potassium", "Chloride", "Bicarbonate", "BUN", "Creatinine", "Glucose",
              "Calcium", "Albumin", "Total Protein", "ALP", "ALT", "AST", "Bilirubin"}},
        };
        return from_json(j);
    }

    /// First panel (in config order) containing the analyte, if any.
    std::optional<std::string> panel_of(const std::string& analyte) const {
        std::string key = normalize(analyte);
        for (const auto& [name, members] : panels_)
            if (std::find(members.begin(), members.end(), key) != members.end()) return name;
        return std::nullopt;
    }

    json to_json() const {
        json j;
        for (const auto& [name, members] : panels_) j[name] = members;
        return j;
    }

private:
    std::vector<std::pair<std::string, std::vector<std::string>>> panels_;
};

// ---------------------------------------------------------------------------
// Bundle construction
// ---------------------------------------------------------------------------

/// Greedy left-anchored windowing: a bundle opens at the first unassigned
/// event's timestamp and absorbs everything within window_hours of it.
inline std::vector<EventBundle> build_bundles(const std::vector<ClinicalEvent>& events,
                                              int window_hours = 1) {
    for (size_t i = 1; i < events.size(); ++i)
        if (events[i].timestamp < events[i - 1].timestamp)
            throw UnsortedInput("build_bundles: events not sorted by timestamp");
    if (window_hours <= 0) throw TraceError("build_bundles: window_hours must be positive");

    std::vector<EventBundle> bundles;
    const std::int64_t window = static_cast<std::int64_t>(window_hours) * 3600;
    size_t i = 0;
    while (i < events.size()) {
        EventBundle b;
        b.index = static_cast<int>(bundles.size());
        b.window_start = events[i].timestamp;
        while (i < events.size() && events[i].timestamp < b.window_start + window)
            b.events.push_back(events[i++]);
        bundles.push_back(std::move(b));
    }
    return bundles;
}

/// Silent-gap annotation. The gap between consecutive bundles is measured
/// from the last event of the earlier bundle to the first event of the later
/// one, rounded to the nearest hour; preceding_gap_hours is set only when it
/// strictly exceeds the threshold.
inline void annotate_time_deltas(std::vector<EventBundle>& bundles, int gap_threshold_hours) {
    for (size_t i = 1; i < bundles.size(); ++i) {
        std::int64_t prev_end = bundles[i - 1].events.back().timestamp;
        std::int64_t next_start = bundles[i].events.front().timestamp;
        int g = static_cast<int>(std::llround(static_cast<double>(next_start - prev_end) / 3600.0));
        if (g > gap_threshold_hours) bundles[i].preceding_gap_hours = g;
    }
}

inline std::string time_delta_token(int gap_hours) {
    return "[TIME_DELTA: +" + std::to_string(gap_hours) + " hours]";
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& section_order() {
    static const std::vector<std::string> order = {"Diagnoses", "Medications", "Labs",
                                                   "Procedures"};
    return order;
}

inline std::string section_of(EventKind k) {
    switch (k) {
        case EventKind::Diagnosis: return "Diagnoses";
        case EventKind::MedicationStart:
        case EventKind::MedicationStop: return "Medications";
        case EventKind::LabResult: return "Labs";
        case EventKind::Procedure: return "Procedures";
    }
    return "?";
}

/// Rendered lines per section. Within Labs, a panel whose present analytes
/// are all Normal collapses to "<Panel>: All Normal" at the position of its
/// first member; abnormal labs are always emitted individually.
inline std::map<std::string, std::vector<std::string>> build_sections(const EventBundle& bundle,
                                                                      const PanelConfig& panels) {
    std::map<std::string, std::vector<std::string>> sections;

    // Panels eligible for aggregation: >=1 member present, all of them Normal.
    std::map<std::string, bool> panel_all_normal;
    for (const auto& e : bundle.events) {
        if (e.kind != EventKind::LabResult) continue;
        const auto& p = std::get<LabPayload>(e.payload);
        auto panel = panels.panel_of(p.analyte);
        if (!panel) continue;
        auto [it, inserted] = panel_all_normal.emplace(*panel, true);
        it->second = it->second && p.category == LabCategory::Normal;
    }

    std::set<std::string> panel_emitted;
    for (const auto& e : bundle.events) {
        std::string section = section_of(e.kind);
        if (e.kind == EventKind::LabResult) {
            const auto& p = std::get<LabPayload>(e.payload);
            auto panel = panels.panel_of(p.analyte);
            if (panel && panel_all_normal.at(*panel)) {
                if (panel_emitted.insert(*panel).second)
                    sections[section].push_back(*panel + ": All Normal");
                continue;
            }
        }
        sections[section].push_back(e.rendered);
    }
    return sections;
}

/// Bundle body text: fixed section order, absent sections omitted.
inline std::string serialize_bundle(const EventBundle& bundle, const PanelConfig& panels) {
    auto sections = build_sections(bundle, panels);
    std::string out;
    for (const auto& name : section_order()) {
        auto it = sections.find(name);
        if (it == sections.end()) continue;
        out += name + ":\n";
        for (const auto& line : it->second) out += "- " + line + "\n";
    }
    if (!out.empty() && out.back() == '\n') out.pop_back();
    return out;
}

/// Full emitted text for one bundle: preceding gap token (when any) on its
/// own line, then the body.
inline std::string bundle_full_text(const EventBundle& bundle, const std::string& body) {
    if (bundle.preceding_gap_hours)
        return time_delta_token(*bundle.preceding_gap_hours) + "\n" + body;
    return body;
}

struct SerializedStream {
    std::string stay_id;
    std::vector<EventBundle> bundles;
    std::vector<std::string> text_per_bundle;  // includes the gap token line when present
};

struct BundlerConfig {
    int window_hours = 1;
    int gap_threshold_hours = 6;
    PanelConfig panels = PanelConfig::defaults();
};

inline SerializedStream serialize_stream(const std::string& stay_id,
                                         const std::vector<ClinicalEvent>& events,
                                         const BundlerConfig& cfg = {}) {
    SerializedStream s;
    s.stay_id = stay_id;
    s.bundles = build_bundles(events, cfg.window_hours);
    annotate_time_deltas(s.bundles, cfg.gap_threshold_hours);
    for (const auto& b : s.bundles)
        s.text_per_bundle.push_back(bundle_full_text(b, serialize_bundle(b, cfg.panels)));
    return s;
}

// ---------------------------------------------------------------------------
// Corpus JSONL
// ---------------------------------------------------------------------------

inline json bundle_record(const SerializedStream& s, size_t i, const PanelConfig& panels) {
    const EventBundle& b = s.bundles[i];
    json j;
    j["stay_id"] = s.stay_id;
    j["bundle_index"] = b.index;
    j["window_start"] = b.window_start;
    if (b.preceding_gap_hours) {
        j["gap_hours"] = *b.preceding_gap_hours;
        j["gap_token"] = time_delta_token(*b.preceding_gap_hours);
    }
    j["text"] = serialize_bundle(b, panels);
    json sec;
    for (const auto& [name, lines] : build_sections(b, panels)) sec[name] = lines;
    j["sections"] = std::move(sec);
    json evs = json::array();
    for (const auto& e : b.events) evs.push_back(event_to_json(e));
    j["events"] = std::move(evs);
    return j;
}

inline std::string corpus_to_jsonl(const std::vector<SerializedStream>& streams,
                                   const PanelConfig& panels) {
    std::vector<json> records;
    for (const auto& s : streams)
        for (size_t i = 0; i < s.bundles.size(); ++i) records.push_back(bundle_record(s, i, panels));
    return to_jsonl(records);
}

inline std::vector<SerializedStream> load_corpus_jsonl(const std::filesystem::path& path) {
    std::map<std::string, SerializedStream> by_stay;
    std::vector<std::string> stay_order;
    for (const auto& j : read_jsonl(path)) {
        std::string stay = j.at("stay_id").get<std::string>();
        auto [it, inserted] = by_stay.try_emplace(stay);
        if (inserted) {
            it->second.stay_id = stay;
            stay_order.push_back(stay);
        }
        EventBundle b;
        b.index = j.at("bundle_index").get<int>();
        b.window_start = j.at("window_start").get<std::int64_t>();
        if (j.contains("gap_hours")) b.preceding_gap_hours = j.at("gap_hours").get<int>();
        for (const auto& ej : j.at("events")) b.events.push_back(event_from_json(ej));
        std::string body = j.at("text").get<std::string>();
        it->second.text_per_bundle.push_back(bundle_full_text(b, body));
        it->second.bundles.push_back(std::move(b));
    }
    std::vector<SerializedStream> streams;
    for (const auto& stay : stay_order) {
        auto& s = by_stay.at(stay);
        std::sort(s.bundles.begin(), s.bundles.end(),
                  [](const EventBundle& a, const EventBundle& b) { return a.index < b.index; });
        streams.push_back(std::move(s));
    }
    return streams;
}

// ---------------------------------------------------------------------------
// Corpus statistics
// ---------------------------------------------------------------------------

struct StreamStats {
    size_t stays = 0;
    size_t bundles = 0;
    size_t events = 0;
    double events_per_bundle = 0.0;
    double bundles_per_stay = 0.0;
    double events_per_stay = 0.0;

    json to_json() const {
        return json{{"stays", stays},
                    {"bundles", bundles},
                    {"events", events},
                    {"events_per_bundle", events_per_bundle},
                    {"bundles_per_stay", bundles_per_stay},
                    {"events_per_stay", events_per_stay}};
    }
};

inline StreamStats stream_stats(const std::vector<SerializedStream>& streams) {
    if (streams.empty()) throw EmptyCorpus("stream_stats: no streams");
    StreamStats st;
    st.stays = streams.size();
    for (const auto& s : streams) {
        st.bundles += s.bundles.size();
        for (const auto& b : s.bundles) st.events += b.events.size();
    }
    if (st.bundles) st.events_per_bundle = static_cast<double>(st.events) / st.bundles;
    st.bundles_per_stay = static_cast<double>(st.bundles) / st.stays;
    st.events_per_stay = static_cast<double>(st.events) / st.stays;
    return st;
}

}  // namespace trace
