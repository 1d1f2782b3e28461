#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace whismm {

// All recoverable failures (bad input, format violations, contract breaches)
// surface as whismm::Error. The CLI turns these into one-line diagnostics.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

// ---------------------------------------------------------------------------
// Little-endian binary IO. File formats (WMEL, WSHD, WBCK) are LE on every
// platform, so reads/writes go through these instead of raw memcpy of structs.
// ---------------------------------------------------------------------------

inline void put_u32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_f32(std::string& out, float f) {
    uint32_t v;
    static_assert(sizeof(v) == sizeof(f));
    std::memcpy(&v, &f, 4);
    put_u32(out, v);
}

// Cursor over an in-memory byte buffer with bounds-checked reads.
struct ByteReader {
    const std::string& buf;
    size_t pos = 0;
    std::string context;  // prepended to error messages

    explicit ByteReader(const std::string& b, std::string ctx = "")
        : buf(b), context(std::move(ctx)) {}

    void need(size_t n, const char* what) const {
        if (pos + n > buf.size()) {
            std::ostringstream os;
            os << context << "truncated: needed " << n << " bytes for " << what
               << " at offset " << pos << ", file has " << buf.size();
            fail(os.str());
        }
    }

    uint32_t u32(const char* what = "u32") {
        need(4, what);
        uint32_t v = (uint32_t)(uint8_t)buf[pos] | ((uint32_t)(uint8_t)buf[pos + 1] << 8) |
                     ((uint32_t)(uint8_t)buf[pos + 2] << 16) | ((uint32_t)(uint8_t)buf[pos + 3] << 24);
        pos += 4;
        return v;
    }

    float f32(const char* what = "f32") {
        uint32_t v = u32(what);
        float f;
        std::memcpy(&f, &v, 4);
        return f;
    }

    std::string bytes(size_t n, const char* what = "bytes") {
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }

    bool at_end() const { return pos == buf.size(); }
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Atomic write: stage into a temp file in the same directory, then rename.
// A crash mid-write never leaves a partial file under the final name.
inline void write_file_atomic(const std::string& path, const std::string& content) {
    namespace fs = std::filesystem;
    fs::path target(path);
    fs::path dir = target.parent_path();
    if (!dir.empty()) fs::create_directories(dir);
    static std::atomic<uint64_t> counter{0};
    fs::path tmp = target;
    tmp += ".tmp." + std::to_string(counter.fetch_add(1)) + "." +
           std::to_string(std::chrono::steady_clock::now().time_since_epoch().count());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail("cannot open file for writing: " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) fail("write failed: " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, target, ec);
    if (ec) {
        fs::remove(tmp, ec);
        fail("rename failed for " + path + ": " + ec.message());
    }
}

}  // namespace whismm
