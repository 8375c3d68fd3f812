#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rtn/tensor.hpp"

namespace rtn {

// Raised for any structurally invalid file: wrong magic, unsupported version,
// truncation, dtype mismatch. Callers map this to their own exit codes.
class CorruptFileError : public std::runtime_error {
  public:
    explicit CorruptFileError(const std::string& what) : std::runtime_error(what) {}
};

namespace io {

inline void write_u8(std::ostream& os, std::uint8_t v) {
    os.put(static_cast<char>(v));
}

inline void write_u16_le(std::ostream& os, std::uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
    os.write(b, 2);
}

inline void write_u32_le(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

inline std::uint8_t read_u8(std::istream& is, const char* what) {
    const int c = is.get();
    if (c == std::char_traits<char>::eof()) throw CorruptFileError(std::string("truncated file reading ") + what);
    return static_cast<std::uint8_t>(c);
}

inline std::uint16_t read_u16_le(std::istream& is, const char* what) {
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2)) throw CorruptFileError(std::string("truncated file reading ") + what);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

inline std::uint32_t read_u32_le(std::istream& is, const char* what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) throw CorruptFileError(std::string("truncated file reading ") + what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32_le(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is, const char* what) {
    const std::uint32_t len = read_u32_le(is, what);
    if (len > (1u << 20)) throw CorruptFileError(std::string("implausible string length reading ") + what);
    std::string s(len, '\0');
    if (len && !is.read(s.data(), len)) throw CorruptFileError(std::string("truncated file reading ") + what);
    return s;
}

template <typename T> struct dtype_code;
template <> struct dtype_code<float> { static constexpr std::uint8_t value = 0; };
template <> struct dtype_code<double> { static constexpr std::uint8_t value = 1; };

template <typename T>
void write_scalar_le(std::ostream& os, T v) {
    if constexpr (sizeof(T) == 4) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        write_u32_le(os, bits);
    } else {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
        os.write(b, 8);
    }
}

template <typename T>
T read_scalar_le(std::istream& is, const char* what) {
    unsigned char b[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(b), sizeof(T))) throw CorruptFileError(std::string("truncated file reading ") + what);
    if constexpr (sizeof(T) == 4) {
        std::uint32_t bits = 0;
        for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(b[i]) << (8 * i);
        T v;
        std::memcpy(&v, &bits, 4);
        return v;
    } else {
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
        T v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
}

}  // namespace io

// Named tensor record, shared by the checkpoint and bag-archive formats:
// name (u32 LE length + UTF-8), rank (u8), extents (u32 LE each),
// dtype code (u8; 0 = f32 LE, 1 = f64 LE), raw element bytes.
template <typename T>
void write_tensor_record(std::ostream& os, const std::string& name, const Tensor<T>& t) {
    io::write_string(os, name);
    io::write_u8(os, static_cast<std::uint8_t>(t.rank()));
    for (std::int64_t e : t.shape()) io::write_u32_le(os, static_cast<std::uint32_t>(e));
    io::write_u8(os, io::dtype_code<T>::value);
    for (T v : t.data()) io::write_scalar_le(os, v);
}

template <typename T>
std::pair<std::string, Tensor<T>> read_tensor_record(std::istream& is) {
    std::string name = io::read_string(is, "tensor name");
    const std::uint8_t rank = io::read_u8(is, "tensor rank");
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::int64_t>(io::read_u32_le(is, "tensor extent"));
    const std::uint8_t code = io::read_u8(is, "tensor dtype");
    if (code != io::dtype_code<T>::value) {
        throw CorruptFileError("tensor '" + name + "' has dtype code " + std::to_string(code) +
                               ", expected " + std::to_string(io::dtype_code<T>::value));
    }
    const std::int64_t n = numel(shape);
    std::vector<T> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = io::read_scalar_le<T>(is, "tensor data");
    return {std::move(name), Tensor<T>::from_data(std::move(shape), std::move(data))};
}

// Writes the payload to "<path>.tmp" in the same directory, then renames over
// the target so readers never observe a partial file.
inline void atomic_write_file(const std::filesystem::path& path,
                              const std::function<void(std::ostream&)>& payload) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        payload(os);
        os.flush();
        if (!os) throw std::runtime_error("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// checkpoint: magic "RTNC", version u32 LE, parameter count u32 LE, records
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterList<T>& params) {
    check_unique_names(params);
    atomic_write_file(path, [&](std::ostream& os) {
        os.write("RTNC", 4);
        io::write_u32_le(os, kCheckpointVersion);
        io::write_u32_le(os, static_cast<std::uint32_t>(params.size()));
        for (const auto& p : params) write_tensor_record(os, p.name, p.value);
    });
}

template <typename T>
ParameterList<T> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "RTNC", 4) != 0) {
        throw CorruptFileError(path.string() + ": bad checkpoint magic");
    }
    const std::uint32_t version = io::read_u32_le(is, "checkpoint version");
    if (version != kCheckpointVersion) {
        throw CorruptFileError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
    }
    const std::uint32_t count = io::read_u32_le(is, "parameter count");
    ParameterList<T> params;
    params.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        auto [name, t] = read_tensor_record<T>(is);
        params.push_back({std::move(name), std::move(t)});
    }
    return params;
}

// Copies stored values into an existing parameter list by name. Every model
// parameter must be present in the file with a matching shape.
template <typename T>
void load_checkpoint(const std::filesystem::path& path, ParameterList<T>& params) {
    ParameterList<T> stored = read_checkpoint<T>(path);
    for (auto& p : params) {
        const Parameter<T>* found = nullptr;
        for (const auto& s : stored) {
            if (s.name == p.name) {
                found = &s;
                break;
            }
        }
        if (!found) throw CorruptFileError(path.string() + ": missing parameter '" + p.name + "'");
        if (found->value.shape() != p.value.shape()) {
            throw CorruptFileError(path.string() + ": parameter '" + p.name + "' has shape " +
                                   shape_str(found->value.shape()) + ", model expects " +
                                   shape_str(p.value.shape()));
        }
        auto dst = p.value.mutable_data();
        auto src = found->value.data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

// key=value sidecar, one pair per line, written atomically
inline void save_kv_sidecar(const std::filesystem::path& path,
                            const std::vector<std::pair<std::string, std::string>>& kv) {
    atomic_write_file(path, [&](std::ostream& os) {
        for (const auto& [k, v] : kv) os << k << "=" << v << "\n";
    });
}

inline std::vector<std::pair<std::string, std::string>> load_kv_sidecar(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::vector<std::pair<std::string, std::string>> kv;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw CorruptFileError(path.string() + ": bad sidecar line '" + line + "'");
        kv.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    return kv;
}

}  // namespace rtn
