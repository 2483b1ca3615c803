#include "klp/io.hpp"

#include <array>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>
#include <unistd.h>

#include "klp/error.hpp"

namespace klp::io {

namespace fs = std::filesystem;

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void for_each_jsonl(std::istream& in, const std::function<void(const json&, std::size_t)>& fn) {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json record;
        try {
            record = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError(std::string("malformed record: ") + e.what(), line_no);
        }
        fn(record, line_no);
    }
}

void for_each_jsonl(const fs::path& path, const std::function<void(const json&, std::size_t)>& fn) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    try {
        for_each_jsonl(in, fn);
    } catch (const ParseError& e) {
        throw ParseError(path.filename().string() + ": " + e.what());
    }
}

std::string to_jsonl(const std::vector<json>& records) {
    std::string out;
    for (const auto& r : records) {
        out += r.dump();
        out += '\n';
    }
    return out;
}

void write_file_atomic(const fs::path& path, std::string_view content) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp." + std::to_string(::getpid());
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot write " + tmp.string());
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        out.flush();
        if (!out) {
            out.close();
            fs::remove(tmp);
            throw Error("write failed for " + path.string());
        }
    }
    fs::rename(tmp, path);
}

namespace {

std::string hex(const unsigned char* data, unsigned len) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned i = 0; i < len; ++i) {
        out += digits[data[i] >> 4];
        out += digits[data[i] & 0xf];
    }
    return out;
}

}  // namespace

std::string sha256_hex(std::string_view data) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned len = 0;
    if (EVP_Digest(data.data(), data.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw Error("sha256 digest failed");
    }
    return hex(md.data(), len);
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_file(path)); }

const json& require_field(const json& obj, const char* name, std::size_t line) {
    if (!obj.is_object()) throw ParseError("record is not an object", line);
    auto it = obj.find(name);
    if (it == obj.end() || it->is_null()) {
        throw ParseError(std::string("missing required field '") + name + "'", line);
    }
    return *it;
}

std::string require_string(const json& obj, const char* name, std::size_t line) {
    const auto& v = require_field(obj, name, line);
    if (!v.is_string()) throw ParseError(std::string("field '") + name + "' must be a string", line);
    return v.get<std::string>();
}

}  // namespace klp::io
