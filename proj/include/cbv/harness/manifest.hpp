#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cbv/encoders/dataset.hpp"

namespace cbv::harness {

enum class Split { Train, Test };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

struct ManifestRecord {
    std::uint64_t id = 0;
    std::string path;  // relative to the manifest's directory
    std::uint32_t label = 0;
    std::string caption;
    Split split = Split::Train;
};

/// A dataset on disk: a class-name table plus one record per image file.
struct DatasetManifest {
    std::vector<std::string> classes;
    std::vector<ManifestRecord> records;
    /// Directory record paths resolve against; set by load/save.
    std::string root;

    std::string resolve(const ManifestRecord& r) const;
    std::vector<std::size_t> indices(Split s) const;
    std::vector<std::size_t> indices(Split s, std::uint32_t label) const;
    const ManifestRecord* find(std::uint64_t id) const;
};

/// Parse and validate manifest JSON. Every record's image file must exist;
/// labels must index the class table; ids and paths must be unique.
DatasetManifest load_manifest(const std::string& path);

/// Canonical serialization: loading and re-saving a manifest reproduces the
/// file byte for byte.
void save_manifest(const DatasetManifest& m, const std::string& path);

/// Decode one split into memory, in record order.
encoders::Dataset to_dataset(const DatasetManifest& m, Split s);

}  // namespace cbv::harness
