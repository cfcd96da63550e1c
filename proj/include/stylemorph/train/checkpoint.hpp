#pragma once

// Versioned binary archive of named arrays, used for checkpoints and
// externally supplied weight files. Each entry carries a dtype tag and an
// explicit shape header; payloads are raw little-endian values, so doubles
// round-trip bit-exactly.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace stylemorph::train {

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

class Archive {
 public:
  static constexpr char kMagic[8] = {'S', 'M', 'A', 'R', 'C', 'H', '0', '1'};
  enum Dtype : uint8_t { kF64 = 0, kI64 = 1, kText = 2 };

  struct Entry {
    Dtype dtype = kF64;
    std::vector<int> shape;
    std::vector<double> f64;
    int64_t i64 = 0;
    std::string text;
  };

  void put_f64(const std::string& name, std::vector<int> shape, std::vector<double> data) {
    if (static_cast<int64_t>(data.size()) != numel(shape))
      throw CheckpointError("archive entry '" + name + "': data size does not match shape");
    Entry e;
    e.dtype = kF64;
    e.shape = std::move(shape);
    e.f64 = std::move(data);
    insert(name, std::move(e));
  }

  void put_i64(const std::string& name, int64_t value) {
    Entry e;
    e.dtype = kI64;
    e.i64 = value;
    insert(name, std::move(e));
  }

  void put_text(const std::string& name, std::string text) {
    Entry e;
    e.dtype = kText;
    e.text = std::move(text);
    insert(name, std::move(e));
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  size_t size() const { return entries_.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
  }

  const std::vector<double>& get_f64(const std::string& name,
                                     const std::vector<int>& expect_shape) const {
    const Entry& e = find(name, kF64);
    if (e.shape != expect_shape)
      throw CheckpointError("archive entry '" + name + "': shape " + shape_str(e.shape) +
                            " does not match expected " + shape_str(expect_shape));
    return e.f64;
  }

  int64_t get_i64(const std::string& name) const { return find(name, kI64).i64; }
  const std::string& get_text(const std::string& name) const { return find(name, kText).text; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open for writing: " + path);
    out.write(kMagic, sizeof(kMagic));
    write_u64(out, entries_.size());
    for (const auto& [name, e] : entries_) {
      write_u64(out, name.size());
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      const uint8_t tag = e.dtype;
      out.write(reinterpret_cast<const char*>(&tag), 1);
      switch (e.dtype) {
        case kF64: {
          write_u64(out, e.shape.size());
          for (int d : e.shape) write_u64(out, static_cast<uint64_t>(d));
          out.write(reinterpret_cast<const char*>(e.f64.data()),
                    static_cast<std::streamsize>(e.f64.size() * sizeof(double)));
          break;
        }
        case kI64:
          out.write(reinterpret_cast<const char*>(&e.i64), sizeof(e.i64));
          break;
        case kText:
          write_u64(out, e.text.size());
          out.write(e.text.data(), static_cast<std::streamsize>(e.text.size()));
          break;
      }
    }
    if (!out) throw CheckpointError("write failed: " + path);
  }

  static Archive load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open: " + path);
    char magic[sizeof(kMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, 6) != 0)
      throw CheckpointError(path + " is not a checkpoint archive");
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
      throw CheckpointError(path + ": unsupported archive version " +
                            std::string(magic + 6, magic + 8));
    Archive ar;
    const uint64_t count = read_u64(in, path);
    for (uint64_t i = 0; i < count; ++i) {
      const uint64_t name_len = read_u64(in, path);
      std::string name(name_len, '\0');
      in.read(name.data(), static_cast<std::streamsize>(name_len));
      uint8_t tag = 0;
      in.read(reinterpret_cast<char*>(&tag), 1);
      if (!in) throw CheckpointError(path + ": truncated archive");
      Entry e;
      switch (tag) {
        case kF64: {
          e.dtype = kF64;
          const uint64_t ndim = read_u64(in, path);
          int64_t n = 1;
          for (uint64_t d = 0; d < ndim; ++d) {
            const auto dim = static_cast<int>(read_u64(in, path));
            e.shape.push_back(dim);
            n *= dim;
          }
          e.f64.resize(static_cast<size_t>(n));
          in.read(reinterpret_cast<char*>(e.f64.data()),
                  static_cast<std::streamsize>(e.f64.size() * sizeof(double)));
          break;
        }
        case kI64:
          e.dtype = kI64;
          in.read(reinterpret_cast<char*>(&e.i64), sizeof(e.i64));
          break;
        case kText: {
          e.dtype = kText;
          const uint64_t len = read_u64(in, path);
          e.text.resize(len);
          in.read(e.text.data(), static_cast<std::streamsize>(len));
          break;
        }
        default:
          throw CheckpointError(path + ": unknown dtype tag " + std::to_string(tag) +
                                " for entry '" + name + "'");
      }
      if (!in) throw CheckpointError(path + ": truncated archive");
      ar.entries_.emplace(std::move(name), std::move(e));
    }
    return ar;
  }

 private:
  std::map<std::string, Entry> entries_;

  void insert(const std::string& name, Entry e) {
    if (!entries_.emplace(name, std::move(e)).second)
      throw CheckpointError("duplicate archive entry '" + name + "'");
  }

  const Entry& find(const std::string& name, Dtype want) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw CheckpointError("missing archive entry '" + name + "'");
    if (it->second.dtype != want)
      throw CheckpointError("archive entry '" + name + "' has the wrong dtype");
    return it->second;
  }

  static int64_t numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }

  static std::string shape_str(const std::vector<int>& shape) {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) s += (i ? "," : "") + std::to_string(shape[i]);
    return s + "]";
  }

  static void write_u64(std::ofstream& out, uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }

  static uint64_t read_u64(std::ifstream& in, const std::string& path) {
    uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) throw CheckpointError(path + ": truncated archive");
    return v;
  }
};

}  // namespace stylemorph::train
