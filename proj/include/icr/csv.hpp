#pragma once

// CSV tables: header row, LF line endings, reals with 6 significant digits.

#include "icr/errors.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <fcntl.h>
#include <unistd.h>

namespace icr {

inline std::string fmt6(double v) {
    if (v == 0.0) return "0"; // folds -0
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

    template <class... Ts>
    void row(const Ts&... cells) {
        require(sizeof...(Ts) == header_.size(), ErrorKind::shape, "CSV row width does not match its header");
        std::vector<std::string> r;
        (r.push_back(cell(cells)), ...);
        rows_.push_back(std::move(r));
    }

    void row_strings(std::vector<std::string> cells) {
        require(cells.size() == header_.size(), ErrorKind::shape, "CSV row width does not match its header");
        rows_.push_back(std::move(cells));
    }

    std::size_t size() const { return rows_.size(); }
    const std::vector<std::vector<std::string>>& rows() const { return rows_; }
    const std::vector<std::string>& header() const { return header_; }

    std::string str() const {
        std::string out;
        auto line = [&](const std::vector<std::string>& r) {
            for (std::size_t i = 0; i < r.size(); ++i) {
                if (i) out.push_back(',');
                out += r[i];
            }
            out.push_back('\n');
        };
        line(header_);
        for (const auto& r : rows_) line(r);
        return out;
    }

    void write(const std::string& path) const { write_text(path, str()); }

    /// Writes `text` and fsyncs before closing.
    static void write_text(const std::string& path, const std::string& text) {
        const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
        require(fd >= 0, ErrorKind::io, "cannot open '" + path + "' for writing");
        std::size_t off = 0;
        while (off < text.size()) {
            const ssize_t n = ::write(fd, text.data() + off, text.size() - off);
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
    template <class T>
    static std::string cell(const T& v) {
        if constexpr (std::is_floating_point_v<T>)
            return fmt6(static_cast<double>(v));
        else if constexpr (std::is_arithmetic_v<T>)
            return std::to_string(v);
        else
            return std::string(v);
    }

    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

/// Parses a CSV produced by CsvTable (no quoting).
inline std::vector<std::vector<std::string>> read_csv(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::io, "cannot open '" + path + "'");
    std::vector<std::vector<std::string>> out;
    std::string line;
    while (std::getline(in, line)) {
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string c;
        while (std::getline(ss, c, ',')) cells.push_back(c);
        out.push_back(std::move(cells));
    }
    return out;
}

} // namespace icr
