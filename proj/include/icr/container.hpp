#pragma once

// Versioned binary containers: 7-byte magic, u32 version, a type-specific
// header, little-endian binary32 payloads and a u32-length-prefixed UTF-8
// JSON metadata blob. Also the backbone weight checkpoint ("ICRWTS").

#include "icr/backbone.hpp"
#include "icr/errors.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

namespace icr {

static_assert(std::endian::native == std::endian::little, "containers assume a little-endian host");

using Json = nlohmann::json;

inline constexpr std::uint32_t container_version = 1;

/// Buffered writer; the file is written and fsync'ed on commit().
class BinaryWriter {
public:
    explicit BinaryWriter(std::string_view magic) { bytes(magic.data(), magic.size()); }

    void bytes(const void* p, std::size_t n) {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u64(std::uint64_t v) { bytes(&v, 8); }
    void f32(float v) { bytes(&v, 4); }
    void f64(double v) { bytes(&v, 8); }

    /// Row-major binary32 payload.
    void matrix_f32(const Matrix& m) {
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) f32(static_cast<float>(m(i, j)));
    }
    void matrix_f64(const Matrix& m) {
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) f64(m(i, j));
    }
    void string(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void json(const Json& j) { string(j.dump()); }

    std::size_t size() const { return buf_.size(); }

    void commit(const std::string& path) const {
        const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
        require(fd >= 0, ErrorKind::io, "cannot open '" + path + "' for writing");
        std::size_t off = 0;
        while (off < buf_.size()) {
            const ssize_t n = ::write(fd, buf_.data() + off, buf_.size() - off);
            if (n <= 0) {
                ::close(fd);
                fail(ErrorKind::io, "write to '" + path + "' failed");
            }
            off += static_cast<std::size_t>(n);
        }
        ::fsync(fd);
        ::close(fd);
    }

private:
    std::vector<char> buf_;
};

class BinaryReader {
public:
    BinaryReader(const std::string& path, std::string_view magic) : path_(path) {
        std::ifstream in(path, std::ios::binary);
        require(static_cast<bool>(in), ErrorKind::io, "cannot open '" + path + "'");
        buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
        require(buf_.size() >= magic.size() && std::memcmp(buf_.data(), magic.data(), magic.size()) == 0,
                ErrorKind::format, "'" + path + "' does not start with the expected magic");
        pos_ = magic.size();
    }

    void bytes(void* p, std::size_t n) {
        require(pos_ + n <= buf_.size(), ErrorKind::format, "'" + path_ + "' is truncated");
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
    }
    std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
    std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
    std::uint64_t u64() { std::uint64_t v; bytes(&v, 8); return v; }
    float f32() { float v; bytes(&v, 4); return v; }
    double f64() { double v; bytes(&v, 8); return v; }

    Matrix matrix_f32(Eigen::Index rows, Eigen::Index cols) {
        require(pos_ + static_cast<std::size_t>(rows * cols) * 4 <= buf_.size(), ErrorKind::format,
                "'" + path_ + "' is truncated");
        Matrix m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<double>(f32());
        return m;
    }
    Matrix matrix_f64(Eigen::Index rows, Eigen::Index cols) {
        Matrix m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = f64();
        return m;
    }
    std::string string() {
        const std::uint32_t n = u32();
        require(pos_ + n <= buf_.size(), ErrorKind::format, "'" + path_ + "' is truncated");
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    Json json() {
        const std::string s = string();
        try {
            return Json::parse(s);
        } catch (const std::exception&) {
            fail(ErrorKind::format, "'" + path_ + "' has a malformed metadata blob");
        }
    }

    void version(std::uint32_t expected) {
        const std::uint32_t v = u32();
        require(v == expected, ErrorKind::format,
                "'" + path_ + "' has format version " + std::to_string(v) + ", this build reads version " +
                    std::to_string(expected));
    }

    bool at_end() const { return pos_ == buf_.size(); }
    void expect_end() const { require(at_end(), ErrorKind::format, "'" + path_ + "' has trailing bytes"); }

private:
    std::string path_;
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

inline const std::string_view pid_magic{"ICRPID\0", 7};
inline const std::string_view router_magic{"ICRRTR\0", 7};
inline const std::string_view weights_magic{"ICRWTS\0", 7};
inline const std::string_view accum_magic{"ICRACC\0", 7};

inline Json config_to_json(const ModelConfig& c) {
    return Json{{"n_layers", c.n_layers},   {"n_heads", c.n_heads},         {"width", c.width},
                {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len}, {"mlp_mult", c.mlp_mult},
                {"intervened_layers", c.routed_layers()}};
}

inline ModelConfig config_from_json(const Json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.width = j.at("width").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.mlp_mult = j.at("mlp_mult").get<int>();
    c.intervened_layers = j.at("intervened_layers").get<std::vector<int>>();
    c.validate();
    return c;
}

/// Named-tensor section: count, then (name, rows, cols, binary32 data) each.
template <class Params>
void write_tensors(BinaryWriter& w, const Params& p) {
    std::uint32_t n = 0;
    p.for_each([&](const std::string&, const Matrix&) { ++n; });
    w.u32(n);
    p.for_each([&](const std::string& name, const Matrix& m) {
        w.string(name);
        w.u32(static_cast<std::uint32_t>(m.rows()));
        w.u32(static_cast<std::uint32_t>(m.cols()));
        w.matrix_f32(m);
    });
}

/// Reads into a pre-shaped parameter set; names and shapes must match.
template <class Params>
void read_tensors(BinaryReader& r, Params& p, ErrorKind mismatch) {
    const std::uint32_t n = r.u32();
    std::uint32_t seen = 0;
    p.for_each([&](const std::string& name, Matrix& m) {
        require(seen < n, mismatch, "container has fewer tensors than expected");
        const std::string got = r.string();
        const auto rows = static_cast<Eigen::Index>(r.u32());
        const auto cols = static_cast<Eigen::Index>(r.u32());
        require(got == name && rows == m.rows() && cols == m.cols(), mismatch,
                "tensor '" + got + "' does not match expected '" + name + "' " + std::to_string(m.rows()) + "x" +
                    std::to_string(m.cols()));
        m = r.matrix_f32(rows, cols);
        ++seen;
    });
    require(seen == n, mismatch, "container has more tensors than expected");
}

inline void save_weights(const BackboneWeights& w, const std::string& path, const Json& extra = Json::object()) {
    BinaryWriter out(weights_magic);
    out.u32(container_version);
    write_tensors(out, w);
    Json meta = extra;
    meta["config"] = config_to_json(w.config);
    meta["config_digest"] = w.config.digest();
    out.json(meta);
    out.commit(path);
}

inline BackboneWeights load_weights(const std::string& path, Json* meta_out = nullptr) {
    BinaryReader in(path, weights_magic);
    in.version(container_version);
    // The tensor section precedes the metadata; peek the config by reading
    // tensors into a shape-free buffer first.
    const std::uint32_t n = in.u32();
    std::vector<std::pair<std::string, Matrix>> tensors;
    for (std::uint32_t i = 0; i < n; ++i) {
        std::string name = in.string();
        const auto rows = static_cast<Eigen::Index>(in.u32());
        const auto cols = static_cast<Eigen::Index>(in.u32());
        tensors.emplace_back(std::move(name), in.matrix_f32(rows, cols));
    }
    const Json meta = in.json();
    in.expect_end();
    BackboneWeights w = BackboneWeights::init(config_from_json(meta.at("config")), 0);
    std::size_t i = 0;
    w.for_each([&](const std::string& name, Matrix& m) {
        require(i < tensors.size() && tensors[i].first == name && tensors[i].second.rows() == m.rows() &&
                    tensors[i].second.cols() == m.cols(),
                ErrorKind::format, "weights container does not match its declared config at '" + name + "'");
        m = std::move(tensors[i].second);
        ++i;
    });
    require(i == tensors.size(), ErrorKind::format, "weights container has extra tensors");
    if (meta_out) *meta_out = meta;
    return w;
}

} // namespace icr
