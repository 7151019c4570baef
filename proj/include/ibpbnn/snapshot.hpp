#pragma once

// Binary snapshot container for a ModelState.
//
//   bytes 0..7   "IBPBNNSN"
//   u32          format version (1)
//   u64          metadata length, then that many bytes of UTF-8 JSON
//   u64          tensor count, then per tensor:
//                  u32 name length, name bytes,
//                  u32 rank, rank x u64 dims,
//                  numel x f64 values (row-major)
//
// Integers and doubles are little-endian. Tensor names are prefixed with
// "posterior/" or "prior/".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "ibpbnn/cl_engine.hpp"

namespace ibpbnn {

static_assert(std::endian::native == std::endian::little, "snapshot I/O assumes a little-endian host");

class SnapshotError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class FileNotFoundError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kSnapshotMagic[8] = {'I', 'B', 'P', 'B', 'N', 'N', 'S', 'N'};
inline constexpr std::uint32_t kSnapshotVersion = 1;

/// A model plus free-form run metadata (seed, task index, config).
struct Snapshot {
  ModelState state;
  nlohmann::json metadata = nlohmann::json::object();
};

inline nlohmann::json spec_to_json(const NetworkSpec& s) {
  return {{"input_dim", s.input_dim},
          {"layer_truncations", s.layer_truncations},
          {"head_dims", s.head_dims},
          {"head_mode", to_string(s.head_mode)},
          {"prior_family", to_string(s.prior_family)},
          {"activation", to_string(s.activation)}};
}

inline PriorFamily prior_family_from_string(const std::string& s) {
  if (s == "ibp") return PriorFamily::ibp;
  if (s == "hibp") return PriorFamily::hibp;
  if (s == "none") return PriorFamily::none;
  throw std::invalid_argument("unknown prior family '" + s + "'");
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.layer_truncations = j.at("layer_truncations").get<std::vector<std::size_t>>();
  s.head_dims = j.at("head_dims").get<std::vector<std::size_t>>();
  s.head_mode = j.at("head_mode").get<std::string>() == "single_head" ? HeadMode::single_head : HeadMode::multi_head;
  s.prior_family = prior_family_from_string(j.at("prior_family").get<std::string>());
  s.activation = j.at("activation").get<std::string>() == "identity" ? Activation::identity : Activation::relu;
  return s;
}

namespace detail {

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& path) : b_(bytes), path_(path) {}

  template <class T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }
  std::string str(std::size_t n) { return std::string(take(n), n); }
  bool done() const { return pos_ == b_.size(); }

 private:
  const char* take(std::size_t n) {
    if (n > b_.size() - pos_) throw SnapshotError("snapshot '" + path_ + "' is truncated");
    const char* p = b_.data() + pos_;
    pos_ += n;
    return p;
  }
  const std::string& b_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline void put_store(std::string& out, const std::string& prefix, const ParamStore& store) {
  for (const auto& [name, t] : store) {
    const std::string full = prefix + name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(full.size()));
    out += full;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  }
}

}  // namespace detail

/// Writes `bytes` to `path` through a sibling temporary file and a rename,
/// so readers never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline std::string encode_snapshot(const Snapshot& snap) {
  const ModelState& s = snap.state;
  nlohmann::json meta = {{"spec", spec_to_json(s.spec)},
                         {"heads", s.heads},
                         {"tasks_trained", s.tasks_trained},
                         {"lambda_q", s.lambda_q},
                         {"lambda_p", s.lambda_p},
                         {"n_stick_samples", s.n_stick_samples},
                         {"head_prior_var", s.head_prior_var},
                         {"run", snap.metadata}};
  const std::string meta_str = meta.dump();
  std::string out(kSnapshotMagic, sizeof kSnapshotMagic);
  detail::put<std::uint32_t>(out, kSnapshotVersion);
  detail::put<std::uint64_t>(out, meta_str.size());
  out += meta_str;
  detail::put<std::uint64_t>(out, s.posterior.size() + s.prior.size());
  detail::put_store(out, "posterior/", s.posterior);
  detail::put_store(out, "prior/", s.prior);
  return out;
}

inline Snapshot decode_snapshot(const std::string& bytes, const std::string& path = "<memory>") {
  detail::Reader r(bytes, path);
  if (r.str(sizeof kSnapshotMagic) != std::string(kSnapshotMagic, sizeof kSnapshotMagic)) {
    throw SnapshotError("'" + path + "' is not a snapshot file (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kSnapshotVersion) {
    throw SnapshotError("unsupported snapshot version " + std::to_string(version) + " in '" + path + "'");
  }
  const auto meta_len = r.get<std::uint64_t>();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.str(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw SnapshotError("corrupt snapshot metadata in '" + path + "': " + e.what());
  }
  Snapshot snap;
  ModelState& s = snap.state;
  try {
    s.spec = spec_from_json(meta.at("spec"));
    s.heads = meta.at("heads").get<std::vector<std::size_t>>();
    s.tasks_trained = meta.at("tasks_trained").get<std::size_t>();
    s.lambda_q = meta.at("lambda_q").get<double>();
    s.lambda_p = meta.at("lambda_p").get<double>();
    s.n_stick_samples = meta.at("n_stick_samples").get<std::size_t>();
    s.head_prior_var = meta.at("head_prior_var").get<double>();
    snap.metadata = meta.value("run", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw SnapshotError("incomplete snapshot metadata in '" + path + "': " + e.what());
  }
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::string name = r.str(r.get<std::uint32_t>());
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    Tensor t(shape);
    const std::string raw = r.str(t.size() * sizeof(double));
    std::memcpy(t.data(), raw.data(), raw.size());
    if (name.rfind("posterior/", 0) == 0) {
      s.posterior.emplace(name.substr(10), std::move(t));
    } else if (name.rfind("prior/", 0) == 0) {
      s.prior.emplace(name.substr(6), std::move(t));
    } else {
      throw SnapshotError("unexpected tensor '" + name + "' in '" + path + "'");
    }
  }
  if (!r.done()) throw SnapshotError("trailing bytes after snapshot tensors in '" + path + "'");
  return snap;
}

inline void save_snapshot(const std::filesystem::path& path, const Snapshot& snap) {
  write_file_atomic(path, encode_snapshot(snap));
}

inline Snapshot load_snapshot(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFoundError("snapshot file not found: '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return decode_snapshot(ss.str(), path.string());
}

}  // namespace ibpbnn
