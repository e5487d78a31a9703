#pragma once

#include "rsp/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace rsp {

struct ModelDescriptor;

// Insertion-ordered name -> tensor map.
class WeightArchive {
public:
    void insert(std::string name, Tensor tensor);
    // Replaces an existing entry in place or appends a new one.
    void set(const std::string& name, Tensor tensor);
    bool erase(const std::string& name);

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    const Tensor* find(const std::string& name) const;
    const Tensor& at(const std::string& name) const;

    std::size_t size() const noexcept { return entries_.size(); }
    const std::vector<std::pair<std::string, Tensor>>& entries() const noexcept { return entries_; }

    // Same names in the same order with bitwise-equal tensors.
    bool bitwise_equal(const WeightArchive& other) const;

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// "RSPW" archive. Layout (little-endian):
//   magic "RSPW", u32 version (1), u32 entry count,
//   per entry: u32 name length, name bytes, u8 rank, rank x u32 dims, f32 payload.
inline constexpr std::uint32_t kArchiveVersion = 1;

std::vector<std::uint8_t> write_archive(const WeightArchive& archive);
WeightArchive read_archive(std::span<const std::uint8_t> bytes);

WeightArchive load_archive(const std::filesystem::path& path);
void save_archive(const WeightArchive& archive, const std::filesystem::path& path);

struct ShapeMismatch {
    std::string name;
    Shape expected;
    Shape actual;
};

struct ValidationReport {
    std::vector<std::string> missing;
    std::vector<ShapeMismatch> mismatched;
    std::vector<std::string> unused;

    bool ok() const noexcept { return missing.empty() && mismatched.empty() && unused.empty(); }
    std::string describe() const;
};

ValidationReport validate_against_descriptor(const WeightArchive& archive, const ModelDescriptor& model);

} // namespace rsp
