#include "rsp/weights_io.hpp"

#include "rsp/errors.hpp"
#include "rsp/model.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>
#include <unordered_set>

namespace rsp {

void WeightArchive::insert(std::string name, Tensor tensor) {
    if (name.empty()) throw InputError("weight archive: entry name must be nonempty");
    if (index_.count(name)) throw InputError("weight archive: duplicate entry '" + name + "'");
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(tensor));
}

void WeightArchive::set(const std::string& name, Tensor tensor) {
    auto it = index_.find(name);
    if (it == index_.end()) {
        insert(name, std::move(tensor));
        return;
    }
    entries_[it->second].second = std::move(tensor);
}

bool WeightArchive::erase(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) return false;
    entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(it->second));
    index_.clear();
    for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(entries_[i].first, i);
    return true;
}

const Tensor* WeightArchive::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second].second;
}

const Tensor& WeightArchive::at(const std::string& name) const {
    const Tensor* t = find(name);
    if (!t) throw InputError("weight archive: no entry named '" + name + "'");
    return *t;
}

bool WeightArchive::bitwise_equal(const WeightArchive& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].first != other.entries_[i].first) return false;
        if (!entries_[i].second.bitwise_equal(other.entries_[i].second)) return false;
    }
    return true;
}

namespace {

constexpr char kMagic[4] = {'R', 'S', 'P', 'W'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::size_t offset() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

    void need(std::size_t n, const char* what) const {
        if (remaining() < n)
            throw FormatError(std::string("truncated archive while reading ") + what + ": need " +
                                  std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left",
                              pos_);
    }

    std::uint8_t u8(const char* what) {
        need(1, what);
        return bytes_[pos_++];
    }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::span<const std::uint8_t> take(std::size_t n, const char* what) {
        need(n, what);
        auto s = bytes_.subspan(pos_, n);
        pos_ += n;
        return s;
    }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

} // namespace

std::vector<std::uint8_t> write_archive(const WeightArchive& archive) {
    std::vector<std::uint8_t> out;
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    put_u32(out, kArchiveVersion);
    put_u32(out, static_cast<std::uint32_t>(archive.size()));
    for (const auto& [name, tensor] : archive.entries()) {
        if (name.size() > std::numeric_limits<std::uint32_t>::max())
            throw InputError("weight archive: name too long");
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.insert(out.end(), name.begin(), name.end());
        out.push_back(static_cast<std::uint8_t>(tensor.rank()));
        for (std::size_t d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
        for (float v : tensor.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

WeightArchive read_archive(std::span<const std::uint8_t> bytes) {
    Reader in(bytes);
    auto magic = in.take(4, "magic");
    if (!std::equal(magic.begin(), magic.end(), std::begin(kMagic)))
        throw FormatError("bad magic: expected \"RSPW\"", 0);
    const std::size_t version_at = in.offset();
    const std::uint32_t version = in.u32("version");
    if (version != kArchiveVersion)
        throw FormatError("unsupported archive version " + std::to_string(version), version_at);
    const std::uint32_t count = in.u32("entry count");

    WeightArchive archive;
    std::unordered_set<std::string> seen;
    for (std::uint32_t e = 0; e < count; ++e) {
        const std::size_t entry_at = in.offset();
        const std::uint32_t name_len = in.u32("name length");
        if (name_len == 0) throw FormatError("empty entry name", entry_at);
        auto name_bytes = in.take(name_len, "name");
        std::string name(name_bytes.begin(), name_bytes.end());
        if (!seen.insert(name).second) throw FormatError("duplicate entry name '" + name + "'", entry_at);

        const std::size_t rank_at = in.offset();
        const std::uint8_t rank = in.u8("rank");
        if (rank < 1 || rank > 4)
            throw FormatError("entry '" + name + "' has unsupported rank " + std::to_string(rank), rank_at);
        Shape shape(rank);
        std::size_t count_elems = 1;
        for (std::uint8_t r = 0; r < rank; ++r) {
            const std::size_t dim_at = in.offset();
            shape[r] = in.u32("dimension");
            if (shape[r] == 0) throw FormatError("entry '" + name + "' has a zero extent", dim_at);
            if (count_elems > std::numeric_limits<std::size_t>::max() / shape[r] / 4)
                throw FormatError("entry '" + name + "' is too large", dim_at);
            count_elems *= shape[r];
        }
        if (in.remaining() / 4 < count_elems)
            throw FormatError("truncated payload for entry '" + name + "': need " +
                                  std::to_string(count_elems * 4) + " bytes, " +
                                  std::to_string(in.remaining()) + " left",
                              in.offset());
        std::vector<float> values(count_elems);
        for (auto& v : values) v = std::bit_cast<float>(in.u32("payload"));
        archive.insert(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    if (in.remaining() != 0)
        throw FormatError(std::to_string(in.remaining()) + " trailing bytes after last entry", in.offset());
    return archive;
}

WeightArchive load_archive(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open weights file " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return read_archive(bytes);
}

void save_archive(const WeightArchive& archive, const std::filesystem::path& path) {
    const auto bytes = write_archive(archive);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot write weights file " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::string ValidationReport::describe() const {
    std::ostringstream oss;
    for (const auto& m : missing) oss << "missing: " << m << "\n";
    for (const auto& m : mismatched)
        oss << "shape mismatch: " << m.name << " expected " << shape_str(m.expected) << " got "
            << shape_str(m.actual) << "\n";
    for (const auto& u : unused) oss << "unused: " << u << "\n";
    return oss.str();
}

ValidationReport validate_against_descriptor(const WeightArchive& archive, const ModelDescriptor& model) {
    ValidationReport report;
    std::unordered_set<std::string> referenced;
    for (const auto& req : required_weights(model)) {
        referenced.insert(req.archive_name);
        const Tensor* t = archive.find(req.archive_name);
        if (!t) {
            report.missing.push_back(req.archive_name);
        } else if (t->shape() != req.shape) {
            report.mismatched.push_back({req.archive_name, req.shape, t->shape()});
        }
    }
    for (const auto& [name, tensor] : archive.entries())
        if (!referenced.count(name)) report.unused.push_back(name);
    return report;
}

} // namespace rsp
