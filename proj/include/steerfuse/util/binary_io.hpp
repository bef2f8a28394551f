#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace steerfuse::io {

class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename U>
constexpr U to_little(U v)
{
    if constexpr (std::endian::native == std::endian::big) {
        U out = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) {
            out = static_cast<U>((out << 8) | ((v >> (8 * i)) & 0xff));
        }
        return out;
    } else {
        return v;
    }
}

inline void append_u64(std::vector<unsigned char>& buf, std::uint64_t v)
{
    v = to_little(v);
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf.insert(buf.end(), p, p + 8);
}

inline void append_i64(std::vector<unsigned char>& buf, std::int64_t v)
{
    append_u64(buf, static_cast<std::uint64_t>(v));
}

inline void append_f64(std::vector<unsigned char>& buf, double v)
{
    append_u64(buf, std::bit_cast<std::uint64_t>(v));
}

inline void append_f32(std::vector<unsigned char>& buf, std::span<const float> values)
{
    const std::size_t start = buf.size();
    buf.resize(start + 4 * values.size());
    unsigned char* out = buf.data() + start;
    for (float f : values) {
        const std::uint32_t u = to_little(std::bit_cast<std::uint32_t>(f));
        std::memcpy(out, &u, 4);
        out += 4;
    }
}

inline std::uint64_t read_u64(const unsigned char* p)
{
    std::uint64_t v;
    std::memcpy(&v, p, 8);
    return to_little(v);
}

inline std::int64_t read_i64(const unsigned char* p) { return static_cast<std::int64_t>(read_u64(p)); }

inline double read_f64(const unsigned char* p) { return std::bit_cast<double>(read_u64(p)); }

inline void read_f32(const unsigned char* p, std::span<float> out)
{
    for (float& f : out) {
        std::uint32_t u;
        std::memcpy(&u, p, 4);
        f = std::bit_cast<float>(to_little(u));
        p += 4;
    }
}

inline void write_all(std::ostream& os, std::span<const unsigned char> bytes, const std::string& what)
{
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) {
        throw std::runtime_error("write failed: " + what);
    }
}

inline void read_exact(std::istream& is, std::span<unsigned char> out, const std::string& what)
{
    is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(out.size()));
    if (is.gcount() != static_cast<std::streamsize>(out.size())) {
        throw FormatError("truncated " + what);
    }
}

} // namespace steerfuse::io
