// SPDX-License-Identifier: Apache-2.0
#include "hoplab/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <openssl/evp.h>

#include "hoplab/errors.hpp"
#include "hoplab/io.hpp"

namespace hoplab {

namespace {

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string fixed2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    std::string s = buf;
    if (s == "-0.00") s = "0.00";
    return s;
}

// Colour-blind friendly palette (Okabe-Ito).
constexpr const char* kPalette[] = {"#0072B2", "#D55E00", "#009E73", "#CC79A7", "#E69F00", "#56B4E9", "#F0E442", "#000000"};

}  // namespace

std::string render_csv(const CsvTable& table) {
    std::string out;
    auto line = [&](const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out += ',';
            out += csv_field(fields[i]);
        }
        out += '\n';
    };
    line(table.header);
    for (const auto& r : table.rows) line(r);
    return out;
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\n') {
            row.push_back(std::move(field));
            field.clear();
            rows.push_back(std::move(row));
            row.clear();
            any = false;
        } else if (c != '\r') {
            field += c;
            any = true;
        }
    }
    if (quoted) throw ParseError("CSV: unterminated quoted field");
    if (any) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string render_svg(const Chart& chart) {
    constexpr double W = 720, H = 420, left = 64, right = 180, top = 40, bottom = 56;
    const double pw = W - left - right, ph = H - top - bottom;
    const double y0 = chart.y_min, y1 = chart.y_max > chart.y_min ? chart.y_max : chart.y_min + 1.0;
    const std::size_t nx = chart.x_ticks.size();
    auto ypix = [&](double v) { return top + ph * (1.0 - (std::clamp(v, y0, y1) - y0) / (y1 - y0)); };
    auto xcenter = [&](std::size_t i) {
        if (chart.kind == Chart::Kind::bar) return left + pw * (static_cast<double>(i) + 0.5) / static_cast<double>(std::max<std::size_t>(nx, 1));
        return nx <= 1 ? left + pw / 2 : left + pw * static_cast<double>(i) / static_cast<double>(nx - 1);
    };

    nlohmann::ordered_json meta;
    meta["title"] = chart.title;
    meta["kind"] = chart.kind == Chart::Kind::line ? "line" : "bar";
    meta["x_label"] = chart.x_label;
    meta["y_label"] = chart.y_label;
    meta["x_ticks"] = chart.x_ticks;
    meta["series"] = nlohmann::ordered_json::array();
    for (const auto& s : chart.series) {
        nlohmann::ordered_json js;
        js["name"] = s.name;
        nlohmann::ordered_json vals = nlohmann::ordered_json::array();
        for (double v : s.values) {
            if (std::isnan(v))
                vals.push_back(nullptr);
            else
                vals.push_back(v);
        }
        js["values"] = std::move(vals);
        meta["series"].push_back(std::move(js));
    }

    std::string o;
    o += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"720\" height=\"420\" viewBox=\"0 0 720 420\" font-family=\"sans-serif\" font-size=\"12\">\n";
    o += "<metadata><![CDATA[" + meta.dump() + "]]></metadata>\n";
    o += "<title>" + xml_escape(chart.title) + "</title>\n";
    o += "<rect width=\"720\" height=\"420\" fill=\"white\"/>\n";
    o += "<text x=\"" + fixed2(left) + "\" y=\"24\" font-size=\"14\">" + xml_escape(chart.title) + "</text>\n";
    // axes and horizontal grid
    for (int g = 0; g <= 4; ++g) {
        const double v = y0 + (y1 - y0) * g / 4.0;
        const std::string y = fixed2(ypix(v));
        o += "<line x1=\"" + fixed2(left) + "\" y1=\"" + y + "\" x2=\"" + fixed2(left + pw) + "\" y2=\"" + y +
             "\" stroke=\"#dddddd\"/>\n";
        o += "<text x=\"" + fixed2(left - 6) + "\" y=\"" + y + "\" text-anchor=\"end\" dominant-baseline=\"middle\">" +
             format_sig6(v) + "</text>\n";
    }
    o += "<line x1=\"" + fixed2(left) + "\" y1=\"" + fixed2(top + ph) + "\" x2=\"" + fixed2(left + pw) + "\" y2=\"" +
         fixed2(top + ph) + "\" stroke=\"black\"/>\n";
    o += "<line x1=\"" + fixed2(left) + "\" y1=\"" + fixed2(top) + "\" x2=\"" + fixed2(left) + "\" y2=\"" +
         fixed2(top + ph) + "\" stroke=\"black\"/>\n";
    for (std::size_t i = 0; i < nx; ++i)
        o += "<text x=\"" + fixed2(xcenter(i)) + "\" y=\"" + fixed2(top + ph + 16) + "\" text-anchor=\"middle\">" +
             xml_escape(chart.x_ticks[i]) + "</text>\n";
    o += "<text x=\"" + fixed2(left + pw / 2) + "\" y=\"" + fixed2(H - 12) + "\" text-anchor=\"middle\">" +
         xml_escape(chart.x_label) + "</text>\n";
    o += "<text transform=\"translate(16 " + fixed2(top + ph / 2) + ") rotate(-90)\" text-anchor=\"middle\">" +
         xml_escape(chart.y_label) + "</text>\n";

    const std::size_t ns = chart.series.size();
    for (std::size_t s = 0; s < ns; ++s) {
        const auto& series = chart.series[s];
        const std::string colour = kPalette[s % std::size(kPalette)];
        if (chart.kind == Chart::Kind::line) {
            std::string pts;
            for (std::size_t i = 0; i < series.values.size() && i < nx; ++i) {
                if (std::isnan(series.values[i])) continue;
                if (!pts.empty()) pts += ' ';
                pts += fixed2(xcenter(i)) + ',' + fixed2(ypix(series.values[i]));
            }
            o += "<polyline fill=\"none\" stroke=\"" + colour + "\" stroke-width=\"2\" points=\"" + pts + "\"/>\n";
        } else {
            const double slot = pw / static_cast<double>(std::max<std::size_t>(nx, 1));
            const double bw = slot * 0.8 / static_cast<double>(std::max<std::size_t>(ns, 1));
            for (std::size_t i = 0; i < series.values.size() && i < nx; ++i) {
                if (std::isnan(series.values[i])) continue;
                const double x = left + slot * static_cast<double>(i) + slot * 0.1 + bw * static_cast<double>(s);
                const double y = ypix(series.values[i]);
                o += "<rect x=\"" + fixed2(x) + "\" y=\"" + fixed2(y) + "\" width=\"" + fixed2(bw) + "\" height=\"" +
                     fixed2(top + ph - y) + "\" fill=\"" + colour + "\"/>\n";
            }
        }
        const double ly = top + 14.0 * static_cast<double>(s) + 8;
        o += "<rect x=\"" + fixed2(W - right + 12) + "\" y=\"" + fixed2(ly - 6) + "\" width=\"12\" height=\"8\" fill=\"" +
             colour + "\"/>\n";
        o += "<text x=\"" + fixed2(W - right + 30) + "\" y=\"" + fixed2(ly) + "\" dominant-baseline=\"middle\">" +
             xml_escape(series.name) + "</text>\n";
    }
    o += "</svg>\n";
    return o;
}

nlohmann::json svg_metadata(const std::string& svg) {
    const std::string open = "<metadata><![CDATA[", close = "]]></metadata>";
    const auto a = svg.find(open);
    const auto b = a == std::string::npos ? a : svg.find(close, a);
    if (a == std::string::npos || b == std::string::npos) throw ParseError("SVG has no embedded metadata");
    try {
        return nlohmann::json::parse(svg.substr(a + open.size(), b - a - open.size()));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("SVG metadata is not JSON: ") + e.what());
    }
}

std::string sha256_hex(std::string_view bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error("SHA-256 computation failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

std::string manifest_json(const std::vector<ManifestEntry>& entries, const nlohmann::ordered_json& meta) {
    nlohmann::ordered_json j;
    j["format"] = "hoplab-manifest/1";
    j["meta"] = meta.is_null() ? nlohmann::ordered_json::object() : meta;
    j["files"] = nlohmann::ordered_json::array();
    for (const auto& e : entries) {
        nlohmann::ordered_json f;
        f["path"] = e.path;
        f["kind"] = e.kind;
        f["bytes"] = e.bytes;
        f["sha256"] = e.sha256;
        j["files"].push_back(std::move(f));
    }
    return j.dump(2) + "\n";
}

std::vector<ManifestEntry> render_report(const ReportBundle& bundle, const std::filesystem::path& out_dir,
                                         const nlohmann::ordered_json& meta, const std::vector<std::string>& extra_files) {
    if (bundle.empty()) throw PreconditionError("report bundle is empty; nothing to render");
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create report directory " + out_dir.string() + ": " + ec.message());

    std::vector<ManifestEntry> entries;
    auto emit = [&](const std::string& rel, const std::string& kind, const std::string& content) {
        write_file(out_dir / rel, content);
        entries.push_back({rel, kind, content.size(), sha256_hex(content)});
    };
    for (const auto& t : bundle.tables) emit(t.name + ".csv", "csv", render_csv(t));
    for (const auto& c : bundle.charts) emit(c.name + ".svg", "svg", render_svg(c));
    for (const auto& [rel, text] : bundle.documents) emit(rel, "json", text);
    for (const auto& rel : extra_files) {
        const std::string content = read_file(out_dir / rel);
        entries.push_back({rel, "artifact", content.size(), sha256_hex(content)});
    }
    std::sort(entries.begin(), entries.end(), [](const ManifestEntry& a, const ManifestEntry& b) { return a.path < b.path; });
    write_file(out_dir / "manifest.json", manifest_json(entries, meta));
    return entries;
}

std::vector<std::string> verify_manifest(const std::filesystem::path& manifest_path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(manifest_path));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("manifest is not JSON: ") + e.what());
    }
    const auto dir = manifest_path.parent_path();
    std::vector<std::string> bad;
    for (const auto& f : j.at("files")) {
        const std::string rel = f.at("path").get<std::string>();
        std::string content;
        try {
            content = read_file(dir / rel);
        } catch (const IoError&) {
            bad.push_back(rel);
            continue;
        }
        if (content.size() != f.at("bytes").get<std::uintmax_t>() || sha256_hex(content) != f.at("sha256").get<std::string>())
            bad.push_back(rel);
    }
    return bad;
}

}  // namespace hoplab
