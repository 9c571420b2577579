#pragma once

#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "trace/events.hpp"

namespace trace {

enum class TableKind { Diagnoses, Medications, Labs, Procedures };

inline std::string_view to_string(TableKind k) {
    switch (k) {
        case TableKind::Diagnoses: return "diagnoses";
        case TableKind::Medications: return "medications";
        case TableKind::Labs: return "labs";
        case TableKind::Procedures: return "procedures";
    }
    return "?";
}

inline std::optional<TableKind> table_kind_from_string(std::string_view s) {
    if (s == "diagnoses") return TableKind::Diagnoses;
    if (s == "medications") return TableKind::Medications;
    if (s == "labs") return TableKind::Labs;
    if (s == "procedures") return TableKind::Procedures;
    return std::nullopt;
}

class MissingColumn : public TraceError {
public:
    MissingColumn(TableKind table, const std::string& column)
        : TraceError("table '" + std::string(to_string(table)) + "' is missing column '" + column +
                     "'") {}
};

class UnsupportedSchema : public TraceError {
public:
    explicit UnsupportedSchema(const std::string& what) : TraceError(what) {}
};

/// Maps logical field names to source column names, per table kind.
/// Column naming is institutional detail, so it always comes from config:
///
///   { "labs": { "stay_id": "stay_id", "timestamp": "charttime",
///               "analyte": "label", "value": "valuenum",
///               "ref_low": "ref_range_lower", "ref_high": "ref_range_upper" },
///     "medications": { ..., "start": "starttime", "stop": "stoptime", ... },
///     ... }
class SchemaMap {
public:
    SchemaMap() = default;

    static SchemaMap from_json(const json& j) {
        SchemaMap m;
        for (const auto& [table_name, fields] : j.items()) {
            auto kind = table_kind_from_string(table_name);
            if (!kind) throw UnsupportedSchema("unknown table kind in schema map: " + table_name);
            for (const auto& [logical, column] : fields.items())
                m.map_[*kind][logical] = column.get<std::string>();
        }
        return m;
    }

    /// A minimal default where column names equal the logical field names.
    static SchemaMap identity() {
        json j = {
            {"diagnoses",
             {{"stay_id", "stay_id"}, {"timestamp", "timestamp"}, {"code", "code"},
              {"description", "description"}}},
            {"medications",
             {{"stay_id", "stay_id"}, {"start", "start"}, {"stop", "stop"}, {"drug", "drug"},
              {"dose", "dose"}, {"route", "route"}}},
            {"labs",
             {{"stay_id", "stay_id"}, {"timestamp", "timestamp"}, {"analyte", "analyte"},
              {"value", "value"}, {"ref_low", "ref_low"}, {"ref_high", "ref_high"}}},
            {"procedures",
             {{"stay_id", "stay_id"}, {"timestamp", "timestamp"}, {"code", "code"},
              {"description", "description"}}},
        };
        return from_json(j);
    }

    std::optional<std::string> column(TableKind table, const std::string& logical) const {
        auto t = map_.find(table);
        if (t == map_.end()) return std::nullopt;
        auto f = t->second.find(logical);
        if (f == t->second.end()) return std::nullopt;
        return f->second;
    }

private:
    std::map<TableKind, std::unordered_map<std::string, std::string>> map_;
};

struct SkippedRow {
    size_t row;  // 1-based data row index (header excluded)
    std::string reason;
};

struct ParseReport {
    size_t rows_seen = 0;
    size_t events_emitted = 0;
    std::vector<SkippedRow> skipped;
};

// ---------------------------------------------------------------------------
// Delimited-text parsing (RFC-4180-style quoting, configurable delimiter)
// ---------------------------------------------------------------------------

inline std::vector<std::vector<std::string>> parse_delimited(std::istream& in, char delim) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool in_quotes = false;
    bool row_has_data = false;
    char c;
    auto end_field = [&]() {
        row.push_back(field);
        field.clear();
    };
    auto end_row = [&]() {
        end_field();
        rows.push_back(std::move(row));
        row.clear();
        row_has_data = false;
    };
    while (in.get(c)) {
        if (in_quotes) {
            if (c == '"') {
                if (in.peek() == '"') {
                    field.push_back('"');
                    in.get(c);
                } else {
                    in_quotes = false;
                }
            } else {
                field.push_back(c);
            }
            continue;
        }
        if (c == '"' && field.empty()) {
            in_quotes = true;
            row_has_data = true;
        } else if (c == delim) {
            end_field();
            row_has_data = true;
        } else if (c == '\n') {
            if (row_has_data || !field.empty() || !row.empty()) end_row();
        } else if (c == '\r') {
            // swallowed; \r\n handled by the \n branch
        } else {
            field.push_back(c);
            row_has_data = true;
        }
    }
    if (row_has_data || !field.empty() || !row.empty()) end_row();
    return rows;
}

namespace detail {

inline std::optional<std::int64_t> opt_timestamp(const std::optional<std::string>& s) {
    if (!s) return std::nullopt;
    return parse_timestamp(*s);
}

inline std::optional<double> opt_decimal(const std::optional<std::string>& s) {
    if (!s) return std::nullopt;
    return parse_decimal(*s);
}

class RowView {
public:
    RowView(const std::vector<std::string>& header_index_to_name,
            const std::unordered_map<std::string, size_t>& name_to_index,
            const std::vector<std::string>& cells)
        : names_(header_index_to_name), index_(name_to_index), cells_(cells) {}

    std::optional<std::string> get(const std::string& column) const {
        auto it = index_.find(column);
        if (it == index_.end() || it->second >= cells_.size()) return std::nullopt;
        return cells_[it->second];
    }

private:
    const std::vector<std::string>& names_;
    const std::unordered_map<std::string, size_t>& index_;
    const std::vector<std::string>& cells_;
};

}  // namespace detail

/// Parse one table into events. The header row must be present. Rows that
/// cannot be interpreted are skipped and counted; a column named by the
/// schema map but absent from the header is fatal for the table.
inline std::vector<ClinicalEvent> parse_table(TableKind kind,
                                              const std::vector<std::vector<std::string>>& rows,
                                              const SchemaMap& schema, ParseReport& report) {
    if (rows.empty()) return {};

    std::unordered_map<std::string, size_t> header;
    for (size_t i = 0; i < rows[0].size(); ++i) header[trim(rows[0][i])] = i;

    auto col = [&](const std::string& logical, bool required) -> std::optional<std::string> {
        auto c = schema.column(kind, logical);
        if (!c) {
            if (required) throw MissingColumn(kind, logical + " (unmapped)");
            return std::nullopt;
        }
        if (!header.count(*c)) {
            if (required) throw MissingColumn(kind, *c);
            return std::nullopt;
        }
        return c;
    };

    std::vector<ClinicalEvent> events;
    auto skip = [&](size_t row, std::string reason) {
        report.skipped.push_back({row, std::move(reason)});
    };

    switch (kind) {
        case TableKind::Labs: {
            auto c_stay = *col("stay_id", true);
            auto c_ts = *col("timestamp", true);
            auto c_analyte = *col("analyte", true);
            auto c_value = *col("value", true);
            auto c_lo = col("ref_low", false);
            auto c_hi = col("ref_high", false);
            for (size_t r = 1; r < rows.size(); ++r) {
                ++report.rows_seen;
                detail::RowView row(rows[0], header, rows[r]);
                auto stay = row.get(c_stay);
                auto ts = detail::opt_timestamp(row.get(c_ts));
                auto analyte = row.get(c_analyte);
                auto value = detail::opt_decimal(row.get(c_value));
                if (!stay || stay->empty()) { skip(r, "missing stay_id"); continue; }
                if (!ts) { skip(r, "unparseable timestamp"); continue; }
                if (!analyte || trim(*analyte).empty()) { skip(r, "missing analyte"); continue; }
                if (!value) { skip(r, "unparseable value"); continue; }
                std::optional<double> lo, hi;
                if (c_lo)
                    if (auto v = row.get(*c_lo)) lo = parse_decimal(*v);
                if (c_hi)
                    if (auto v = row.get(*c_hi)) hi = parse_decimal(*v);
                if (lo && hi && *lo > *hi) { skip(r, "ref_low > ref_high"); continue; }
                // A half-open range is treated as missing: category Unknown.
                if (!lo || !hi) { lo.reset(); hi.reset(); }
                events.push_back(make_lab_event(*stay, *ts, trim(*analyte), *value, lo, hi));
                ++report.events_emitted;
            }
            break;
        }
        case TableKind::Medications: {
            auto c_stay = *col("stay_id", true);
            auto c_start = *col("start", true);
            auto c_stop = col("stop", false);
            auto c_drug = *col("drug", true);
            auto c_dose = col("dose", false);
            auto c_route = col("route", false);
            for (size_t r = 1; r < rows.size(); ++r) {
                ++report.rows_seen;
                detail::RowView row(rows[0], header, rows[r]);
                auto stay = row.get(c_stay);
                auto start = detail::opt_timestamp(row.get(c_start));
                auto drug = row.get(c_drug);
                if (!stay || stay->empty()) { skip(r, "missing stay_id"); continue; }
                if (!start) { skip(r, "unparseable start time"); continue; }
                if (!drug || trim(*drug).empty()) { skip(r, "missing drug"); continue; }
                std::string dose, route;
                if (c_dose)
                    if (auto v = row.get(*c_dose)) dose = trim(*v);
                if (c_route)
                    if (auto v = row.get(*c_route)) route = trim(*v);
                events.push_back(
                    make_med_event(*stay, *start, MedPhase::Start, trim(*drug), dose, route));
                ++report.events_emitted;
                // A populated stop time makes the row emit both phases.
                if (c_stop) {
                    if (auto v = row.get(*c_stop); v && !trim(*v).empty()) {
                        auto stop = parse_timestamp(*v);
                        if (!stop) { skip(r, "unparseable stop time"); continue; }
                        events.push_back(make_med_event(*stay, *stop, MedPhase::Stop, trim(*drug),
                                                        dose, route));
                        ++report.events_emitted;
                    }
                }
            }
            break;
        }
        case TableKind::Diagnoses:
        case TableKind::Procedures: {
            auto c_stay = *col("stay_id", true);
            auto c_ts = *col("timestamp", true);
            auto c_code = col("code", false);
            auto c_desc = col("description", false);
            if (!c_code && !c_desc) throw MissingColumn(kind, "code/description");
            EventKind ek =
                kind == TableKind::Diagnoses ? EventKind::Diagnosis : EventKind::Procedure;
            for (size_t r = 1; r < rows.size(); ++r) {
                ++report.rows_seen;
                detail::RowView row(rows[0], header, rows[r]);
                auto stay = row.get(c_stay);
                auto ts = detail::opt_timestamp(row.get(c_ts));
                if (!stay || stay->empty()) { skip(r, "missing stay_id"); continue; }
                if (!ts) { skip(r, "unparseable timestamp"); continue; }
                std::string code, desc;
                if (c_code)
                    if (auto v = row.get(*c_code)) code = trim(*v);
                if (c_desc)
                    if (auto v = row.get(*c_desc)) desc = trim(*v);
                if (code.empty() && desc.empty()) { skip(r, "empty code and description"); continue; }
                events.push_back(make_coded_event(*stay, *ts, ek, code, desc));
                ++report.events_emitted;
            }
            break;
        }
    }
    return events;
}

/// Parse a set of tables and return events grouped per stay, each group
/// sorted ascending by (timestamp, stable input order). Tables are consumed
/// in a fixed kind order so the stable tiebreak is reproducible.
inline std::map<std::string, std::vector<ClinicalEvent>> parse_tables(
    const std::map<TableKind, std::vector<std::vector<std::string>>>& tables,
    const SchemaMap& schema, ParseReport& report) {
    std::vector<ClinicalEvent> all;
    for (TableKind kind : {TableKind::Diagnoses, TableKind::Medications, TableKind::Labs,
                           TableKind::Procedures}) {
        auto it = tables.find(kind);
        if (it == tables.end()) continue;
        auto events = parse_table(kind, it->second, schema, report);
        all.insert(all.end(), std::make_move_iterator(events.begin()),
                   std::make_move_iterator(events.end()));
    }
    std::map<std::string, std::vector<ClinicalEvent>> by_stay;
    for (auto& e : all) by_stay[e.stay_id].push_back(std::move(e));
    for (auto& [stay, events] : by_stay) {
        std::stable_sort(events.begin(), events.end(),
                         [](const ClinicalEvent& a, const ClinicalEvent& b) {
                             return a.timestamp < b.timestamp;
                         });
    }
    return by_stay;
}

// ---------------------------------------------------------------------------
// Events JSONL
// ---------------------------------------------------------------------------

inline std::map<std::string, std::vector<ClinicalEvent>> group_by_stay(
    std::vector<ClinicalEvent> events) {
    std::map<std::string, std::vector<ClinicalEvent>> by_stay;
    for (auto& e : events) by_stay[e.stay_id].push_back(std::move(e));
    for (auto& [stay, list] : by_stay)
        std::stable_sort(list.begin(), list.end(),
                         [](const ClinicalEvent& a, const ClinicalEvent& b) {
                             return a.timestamp < b.timestamp;
                         });
    return by_stay;
}

inline std::map<std::string, std::vector<ClinicalEvent>> load_events_jsonl(
    const std::filesystem::path& path) {
    std::vector<ClinicalEvent> events;
    for (const auto& j : read_jsonl(path)) events.push_back(event_from_json(j));
    return group_by_stay(std::move(events));
}

inline std::string events_to_jsonl(
    const std::map<std::string, std::vector<ClinicalEvent>>& by_stay) {
    std::vector<json> records;
    for (const auto& [stay, events] : by_stay)
        for (const auto& e : events) records.push_back(event_to_json(e));
    return to_jsonl(records);
}

}  // namespace trace
