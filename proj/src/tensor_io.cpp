#include "tsal/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "tsal/common.hpp"

namespace tsal {
namespace {

static_assert(std::endian::native == std::endian::little, "record format assumes little-endian host");

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw FormatError("cannot open " + path.string() + " for writing");
  }
  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void record(const NamedTensor& t) {
    u32(static_cast<std::uint32_t>(t.name.size()));
    bytes(t.name.data(), t.name.size());
    u32(static_cast<std::uint32_t>(t.tensor.rank()));
    for (std::size_t d : t.tensor.shape()) u64(d);
    bytes(t.tensor.data().data(), t.tensor.numel() * sizeof(float));
  }
  void finish(const std::filesystem::path& path) {
    out_.flush();
    if (!out_) throw FormatError("failed writing " + path.string());
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  bool at_end() const { return pos_ == buf_.size(); }
  void bytes(void* p, std::size_t n) {
    if (buf_.size() - pos_ < n)
      throw TruncatedFileError(path_.string() + ": truncated at byte " + std::to_string(pos_));
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  void magic(const char (&expect)[4]) {
    char m[4];
    bytes(m, 4);
    if (std::memcmp(m, expect, 4) != 0)
      throw FormatError(path_.string() + ": bad magic, expected " + std::string(expect, 4));
    const std::uint32_t version = u32();
    if (version != kFormatVersion)
      throw FormatError(path_.string() + ": unsupported version " + std::to_string(version));
  }
  NamedTensor record() {
    NamedTensor t;
    const std::uint32_t len = u32();
    if (len > buf_.size()) throw TruncatedFileError(path_.string() + ": name length exceeds file size");
    t.name.resize(len);
    bytes(t.name.data(), len);
    const std::uint32_t rank = u32();
    if (rank > 16) throw FormatError(path_.string() + ": implausible rank " + std::to_string(rank));
    Shape shape(rank);
    std::uint64_t count = 1;
    for (auto& d : shape) {
      d = u64();
      if (d != 0 && count > buf_.size() / d)
        throw TruncatedFileError(path_.string() + ": tensor '" + t.name + "' larger than file");
      count *= d;
    }
    if (count * sizeof(float) > buf_.size() - pos_)
      throw TruncatedFileError(path_.string() + ": payload of '" + t.name + "' truncated");
    std::vector<float> data(count);
    bytes(data.data(), count * sizeof(float));
    t.tensor = Tensor(std::move(shape), std::move(data));
    return t;
  }

 private:
  std::filesystem::path path_;
  std::vector<char> buf_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  Writer w(path);
  w.bytes(kCheckpointMagic, 4);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) w.record(t);
  w.finish(path);
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  Reader r(path);
  r.magic(kCheckpointMagic);
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) out.push_back(r.record());
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after last record");
  return out;
}

void write_feature_file(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  Writer w(path);
  w.bytes(kFeatureMagic, 4);
  w.u32(kFormatVersion);
  for (const auto& t : tensors) w.record(t);
  w.finish(path);
}

std::vector<NamedTensor> read_feature_records(const std::filesystem::path& path) {
  Reader r(path);
  r.magic(kFeatureMagic);
  std::vector<NamedTensor> out;
  while (!r.at_end()) out.push_back(r.record());
  return out;
}

}  // namespace tsal
