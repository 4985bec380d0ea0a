// SPDX-License-Identifier: Apache-2.0
//
// Report emission: CSV tables, dependency-free SVG charts that carry their
// data in a <metadata> block, and a manifest of SHA-256 checksums. Output is a
// pure function of the bundle, so two renders are byte-identical.
#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace hoplab {

struct CsvTable {
    std::string name;  // file stem, may contain '/' for subdirectories
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

struct ChartSeries {
    std::string name;
    std::vector<double> values;  // NaN marks a missing point
};

struct Chart {
    enum class Kind { line, bar };
    std::string name;  // file stem
    std::string title;
    Kind kind = Kind::line;
    std::string x_label;
    std::string y_label;
    std::vector<std::string> x_ticks;
    std::vector<ChartSeries> series;
    double y_min = 0.0;
    double y_max = 1.0;
};

struct ReportBundle {
    std::vector<CsvTable> tables;
    std::vector<Chart> charts;
    std::vector<std::pair<std::string, std::string>> documents;  // (relative path, text)
    bool empty() const { return tables.empty() && charts.empty() && documents.empty(); }
};

std::string render_csv(const CsvTable& table);
// Throws ParseError on unbalanced quotes.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);
std::string render_svg(const Chart& chart);
// The JSON embedded in an SVG rendered above. Throws ParseError.
nlohmann::json svg_metadata(const std::string& svg);

std::string sha256_hex(std::string_view bytes);

struct ManifestEntry {
    std::string path;  // relative to the manifest's directory, '/' separated
    std::string kind;
    std::uintmax_t bytes = 0;
    std::string sha256;
};

// Renders every table/chart/document under out_dir and writes
// out_dir/manifest.json listing them plus `extra_files` (paths relative to
// out_dir, e.g. upstream artifacts). Throws PreconditionError for an empty
// bundle before touching the file system, IoError when out_dir is unwritable.
std::vector<ManifestEntry> render_report(const ReportBundle& bundle, const std::filesystem::path& out_dir,
                                         const nlohmann::ordered_json& meta = {},
                                         const std::vector<std::string>& extra_files = {});

std::string manifest_json(const std::vector<ManifestEntry>& entries, const nlohmann::ordered_json& meta);

// Rehashes every listed file; returns the paths whose size or checksum differ
// (or that are missing).
std::vector<std::string> verify_manifest(const std::filesystem::path& manifest_path);

}  // namespace hoplab
