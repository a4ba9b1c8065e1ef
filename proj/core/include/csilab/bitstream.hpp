#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace csilab {

/// Appends fixed-width unsigned fields MSB-first into a byte buffer.
class BitWriter {
   public:
    void write(std::uint32_t value, int width);
    void write_bit(bool bit) { write(bit ? 1u : 0u, 1); }

    std::size_t bit_length() const { return bits_; }
    const std::vector<std::uint8_t>& bytes() const { return bytes_; }
    std::vector<std::uint8_t> take() && { return std::move(bytes_); }

   private:
    std::vector<std::uint8_t> bytes_;
    std::size_t bits_ = 0;
};

/// Reads fields written by BitWriter. Throws FormatError past the end.
class BitReader {
   public:
    BitReader(std::span<const std::uint8_t> bytes, std::size_t bit_length);

    std::uint32_t read(int width);
    bool read_bit() { return read(1) != 0; }
    std::size_t remaining() const { return length_ - pos_; }

   private:
    std::span<const std::uint8_t> bytes_;
    std::size_t length_;
    std::size_t pos_ = 0;
};

/// Little-endian scalar helpers for the binary containers.
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v);
void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v);
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v);
void put_f32(std::vector<std::uint8_t>& out, float v);

/// Cursor over a byte buffer; every read checks bounds and throws
/// FormatError("truncated payload") on overrun.
class ByteCursor {
   public:
    explicit ByteCursor(std::span<const std::uint8_t> data) : data_(data) {}

    std::uint16_t u16();
    std::uint32_t u32();
    std::uint64_t u64();
    float f32();
    std::span<const std::uint8_t> bytes(std::size_t n);

    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return data_.size() - pos_; }

   private:
    void need(std::size_t n) const;

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

}  // namespace csilab
