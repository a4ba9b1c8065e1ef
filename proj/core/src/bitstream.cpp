#include "csilab/bitstream.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

#include "csilab/types.hpp"

namespace csilab {

void BitWriter::write(std::uint32_t value, int width) {
    if (width < 1 || width > 32) {
        throw std::invalid_argument("BitWriter: field width must be in [1, 32]");
    }
    if (width < 32 && (value >> width) != 0) {
        throw std::invalid_argument("BitWriter: value does not fit in field width");
    }
    for (int b = width - 1; b >= 0; --b) {
        if (bits_ % 8 == 0) bytes_.push_back(0);
        if ((value >> b) & 1u) {
            bytes_.back() |= static_cast<std::uint8_t>(0x80u >> (bits_ % 8));
        }
        ++bits_;
    }
}

BitReader::BitReader(std::span<const std::uint8_t> bytes, std::size_t bit_length)
    : bytes_(bytes), length_(bit_length) {
    if ((bit_length + 7) / 8 > bytes.size()) {
        throw FormatError("bit buffer shorter than declared bit length");
    }
}

std::uint32_t BitReader::read(int width) {
    if (width < 1 || width > 32) {
        throw std::invalid_argument("BitReader: field width must be in [1, 32]");
    }
    if (pos_ + static_cast<std::size_t>(width) > length_) {
        throw FormatError("bit buffer exhausted");
    }
    std::uint32_t v = 0;
    for (int b = 0; b < width; ++b, ++pos_) {
        const std::uint8_t byte = bytes_[pos_ / 8];
        v = (v << 1) | ((byte >> (7 - pos_ % 8)) & 1u);
    }
    return v;
}

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

void ByteCursor::need(std::size_t n) const {
    if (n > remaining()) throw FormatError("truncated payload");
}

std::uint16_t ByteCursor::u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(data_[pos_] | (data_[pos_ + 1] << 8));
    pos_ += 2;
    return v;
}

std::uint32_t ByteCursor::u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | data_[pos_ + i];
    pos_ += 4;
    return v;
}

std::uint64_t ByteCursor::u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | data_[pos_ + i];
    pos_ += 8;
    return v;
}

float ByteCursor::f32() { return std::bit_cast<float>(u32()); }

std::span<const std::uint8_t> ByteCursor::bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
}

}  // namespace csilab
