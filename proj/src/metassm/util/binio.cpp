#include "metassm/util/binio.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "metassm/util/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");
static_assert(sizeof(double) == 8);

namespace metassm {

void write_u64(std::ostream& os, std::uint64_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::istream& is) {
  std::uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw IoError("unexpected end of stream reading u64");
  return v;
}

void write_f64(std::ostream& os, const double* p, std::size_t n) {
  os.write(reinterpret_cast<const char*>(p),
           static_cast<std::streamsize>(n * sizeof(double)));
}

void read_f64(std::istream& is, double* p, std::size_t n) {
  is.read(reinterpret_cast<char*>(p),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!is) throw IoError("unexpected end of stream reading f64 payload");
}

void write_block(std::ostream& os, const ArrayBlock& block) {
  write_u64(os, block.dims.size());
  for (auto d : block.dims) write_u64(os, d);
  write_f64(os, block.data.data(), block.data.size());
}

ArrayBlock read_block(std::istream& is) {
  ArrayBlock block;
  const std::uint64_t rank = read_u64(is);
  if (rank > 8) throw IoError("array block rank " + std::to_string(rank) +
                              " exceeds supported maximum");
  block.dims.resize(rank);
  for (auto& d : block.dims) d = read_u64(is);
  block.data.resize(block.count());
  read_f64(is, block.data.data(), block.data.size());
  return block;
}

void write_blocks_file(const std::filesystem::path& path,
                       const std::vector<ArrayBlock>& blocks) {
  std::ostringstream buf(std::ios::binary);
  for (const auto& block : blocks) write_block(buf, block);
  write_text_file(path, buf.str());
}

std::vector<ArrayBlock> read_blocks_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::vector<ArrayBlock> blocks;
  while (is.peek() != std::char_traits<char>::eof()) {
    blocks.push_back(read_block(is));
  }
  return blocks;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return buf.str();
}

void write_text_file(const std::filesystem::path& path,
                     const std::string& content) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::uint64_t hash_bytes(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace metassm
