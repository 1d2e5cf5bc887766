#include "mpcpa/bytes.hpp"

#include <bit>
#include <string>

#include "mpcpa/error.hpp"

namespace mpcpa {

void ByteWriter::put_u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::put_u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::put_f64(double v) { put_u64(std::bit_cast<std::uint64_t>(v)); }

void ByteWriter::put_tag(std::string_view tag) {
  for (char c : tag) out_.push_back(static_cast<std::uint8_t>(c));
}

void ByteReader::need(std::size_t n) const {
  if (data_.size() - pos_ < n) {
    throw FormatError("truncated blob: need " + std::to_string(n) + " bytes at offset " +
                      std::to_string(pos_) + ", have " + std::to_string(data_.size() - pos_));
  }
}

std::uint8_t ByteReader::get_u8() {
  need(1);
  return data_[pos_++];
}

std::uint32_t ByteReader::get_u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
  return v;
}

std::uint64_t ByteReader::get_u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
  return v;
}

double ByteReader::get_f64() { return std::bit_cast<double>(get_u64()); }

void ByteReader::expect_tag(std::string_view tag) {
  need(tag.size());
  for (char c : tag) {
    if (data_[pos_++] != static_cast<std::uint8_t>(c)) {
      throw FormatError("bad magic: expected '" + std::string(tag) + "'");
    }
  }
}

std::span<const std::uint8_t> ByteReader::get_bytes(std::size_t n) {
  need(n);
  auto s = data_.subspan(pos_, n);
  pos_ += n;
  return s;
}

}  // namespace mpcpa
