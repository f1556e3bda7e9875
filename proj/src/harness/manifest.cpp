#include "cbv/harness/manifest.hpp"

#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "cbv/error.hpp"
#include "cbv/harness/png.hpp"

namespace fs = std::filesystem;

namespace cbv::harness {

std::string split_name(Split s) { return s == Split::Train ? "train" : "test"; }

Split split_from_name(const std::string& name) {
    if (name == "train") return Split::Train;
    if (name == "test") return Split::Test;
    throw ParseError("unknown split '" + name + "'");
}

std::string DatasetManifest::resolve(const ManifestRecord& r) const {
    return root.empty() ? r.path : (fs::path(root) / r.path).string();
}

std::vector<std::size_t> DatasetManifest::indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (records[i].split == s) out.push_back(i);
    return out;
}

std::vector<std::size_t> DatasetManifest::indices(Split s, std::uint32_t label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
        if (records[i].split == s && records[i].label == label) out.push_back(i);
    return out;
}

const ManifestRecord* DatasetManifest::find(std::uint64_t id) const {
    for (const auto& r : records)
        if (r.id == id) return &r;
    return nullptr;
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingFile("cannot open " + path);

    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("manifest: ") + e.what());
    }

    DatasetManifest m;
    m.root = fs::path(path).parent_path().string();
    try {
        m.classes = doc.at("classes").get<std::vector<std::string>>();
        for (const auto& rec : doc.at("records")) {
            ManifestRecord r;
            r.id = rec.at("id").get<std::uint64_t>();
            r.path = rec.at("path").get<std::string>();
            r.label = rec.at("label").get<std::uint32_t>();
            r.caption = rec.at("caption").get<std::string>();
            r.split = split_from_name(rec.at("split").get<std::string>());
            m.records.push_back(std::move(r));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("manifest: ") + e.what());
    }

    if (m.records.empty()) throw EmptyManifest("manifest has no records");
    std::set<std::uint64_t> ids;
    std::set<std::string> paths;
    for (const auto& r : m.records) {
        if (!ids.insert(r.id).second)
            throw DuplicateRecord("record id " + std::to_string(r.id) + " appears twice");
        if (!paths.insert(r.path).second) throw DuplicateRecord("record path reused: " + r.path);
        if (r.label >= m.classes.size())
            throw BadLabel("label " + std::to_string(r.label) + " outside the class table");
        if (!fs::exists(m.resolve(r))) throw MissingFile("image not found: " + m.resolve(r));
    }
    return m;
}

void save_manifest(const DatasetManifest& m, const std::string& path) {
    nlohmann::ordered_json doc;
    doc["classes"] = m.classes;
    doc["records"] = nlohmann::ordered_json::array();
    for (const auto& r : m.records) {
        nlohmann::ordered_json rec;
        rec["id"] = r.id;
        rec["path"] = r.path;
        rec["label"] = r.label;
        rec["caption"] = r.caption;
        rec["split"] = split_name(r.split);
        doc["records"].push_back(std::move(rec));
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw MissingFile("cannot open " + path + " for writing");
    out << doc.dump(2) << '\n';
}

encoders::Dataset to_dataset(const DatasetManifest& m, Split s) {
    encoders::Dataset data;
    data.num_classes = m.classes.size();
    for (std::size_t i : m.indices(s))
        data.samples.push_back({read_png_tensor(m.resolve(m.records[i])), m.records[i].label});
    return data;
}

}  // namespace cbv::harness
