#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace metassm {

/// Binary array block: u64 rank, u64 dims[rank], f64 data (all little-endian).
/// Several blocks may be concatenated in one stream.
struct ArrayBlock {
  std::vector<std::uint64_t> dims;
  std::vector<double> data;

  std::uint64_t count() const {
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

void write_u64(std::ostream& os, std::uint64_t v);
std::uint64_t read_u64(std::istream& is);
void write_f64(std::ostream& os, const double* p, std::size_t n);
void read_f64(std::istream& is, double* p, std::size_t n);

void write_block(std::ostream& os, const ArrayBlock& block);
ArrayBlock read_block(std::istream& is);

void write_blocks_file(const std::filesystem::path& path,
                       const std::vector<ArrayBlock>& blocks);
std::vector<ArrayBlock> read_blocks_file(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
/// Writes via a temp file + rename so readers never observe partial content.
void write_text_file(const std::filesystem::path& path,
                     const std::string& content);

/// FNV-1a over raw bytes; used to detect unintended parameter mutation.
std::uint64_t hash_bytes(const void* data, std::size_t n);

}  // namespace metassm
