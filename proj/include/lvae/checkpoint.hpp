#pragma once

// Checkpoint file layout:
//
//   "LVAECKPT1\n"
//   <one-line JSON header>\n
//   repeated tensor records:
//     u32 name length, name bytes, u32 rows, u32 cols, u64 payload bytes,
//     payload (float32 or float64 little-endian, as declared in the header)
//
// Tensors cover parameters, batch-norm running statistics and optimizer
// moments, so a loaded checkpoint continues a run bit-exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "lvae/errors.hpp"
#include "lvae/model.hpp"
#include "lvae/model_config.hpp"
#include "lvae/optim.hpp"
#include "lvae/svol.hpp"

namespace lvae {

inline constexpr std::string_view kCheckpointMagic = "LVAECKPT1\n";

struct NamedTensor {
  std::string name;
  std::uint32_t rows = 0, cols = 0;
  std::vector<double> values;  ///< widened on read; written at the header's precision
};

struct CheckpointData {
  nlohmann::json header;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

template <class U>
void put_le(std::string& out, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(std::string_view in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw FormatError("checkpoint: truncated record", pos);
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(U);
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const CheckpointData& c) {
  const std::string precision = c.header.value("precision", "float32");
  if (precision != "float32" && precision != "float64")
    throw FormatError("checkpoint: unsupported precision '" + precision + "'", 0);
  const bool f64 = precision == "float64";
  std::string out(kCheckpointMagic);
  out += c.header.dump();
  out.push_back('\n');
  for (const auto& t : c.tensors) {
    if (t.values.size() != static_cast<std::size_t>(t.rows) * t.cols)
      throw ShapeError("checkpoint: tensor '" + t.name + "' size does not match its dims");
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    detail::put_le<std::uint32_t>(out, t.rows);
    detail::put_le<std::uint32_t>(out, t.cols);
    detail::put_le<std::uint64_t>(out, t.values.size() * (f64 ? 8u : 4u));
    for (double v : t.values) {
      if (f64) detail::put_le(out, std::bit_cast<std::uint64_t>(v));
      else detail::put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
  }
  return out;
}

inline CheckpointData decode_checkpoint(std::string_view bytes) {
  if (!bytes.starts_with(kCheckpointMagic)) throw FormatError("checkpoint: bad magic", 0);
  std::size_t pos = kCheckpointMagic.size();
  const std::size_t eol = bytes.find('\n', pos);
  if (eol == std::string_view::npos) throw FormatError("checkpoint: missing header line", pos);
  CheckpointData c;
  try {
    c.header = nlohmann::json::parse(bytes.substr(pos, eol - pos));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: header is not valid JSON: ") + e.what(), pos);
  }
  const std::string precision = c.header.value("precision", "float32");
  if (precision != "float32" && precision != "float64")
    throw FormatError("checkpoint: unsupported precision '" + precision + "'", pos);
  const bool f64 = precision == "float64";
  pos = eol + 1;
  while (pos < bytes.size()) {
    const std::size_t start = pos;
    NamedTensor t;
    auto len = detail::get_le<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) throw FormatError("checkpoint: truncated tensor name", pos);
    t.name = std::string(bytes.substr(pos, len));
    pos += len;
    t.rows = detail::get_le<std::uint32_t>(bytes, pos);
    t.cols = detail::get_le<std::uint32_t>(bytes, pos);
    auto nbytes = detail::get_le<std::uint64_t>(bytes, pos);
    const std::uint64_t n = static_cast<std::uint64_t>(t.rows) * t.cols;
    if (nbytes != n * (f64 ? 8u : 4u)) throw FormatError("checkpoint: tensor '" + t.name + "' has bad payload length", start);
    if (pos + nbytes > bytes.size()) throw FormatError("checkpoint: truncated payload of '" + t.name + "'", pos);
    t.values.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) {
      if (f64) t.values[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, pos));
      else t.values[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, pos));
    }
    c.tensors.push_back(std::move(t));
  }
  return c;
}

inline void write_checkpoint(const CheckpointData& c, const std::filesystem::path& path) {
  write_file_bytes(path, encode_checkpoint(c));
}

inline CheckpointData read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_file_bytes(path));
}

// ------------------------------------------------------------ model <-> tensors

template <class T>
NamedTensor to_named(const std::string& name, const nn::Mat<T>& m) {
  NamedTensor t{name, static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols()), {}};
  t.values.assign(m.data(), m.data() + m.size());
  return t;
}

template <class T>
void from_named(const CheckpointData& c, const std::string& name, nn::Mat<T>& m) {
  const NamedTensor* t = c.find(name);
  if (!t) throw FormatError("checkpoint: missing tensor '" + name + "'", 0);
  if (t->rows != m.rows() || t->cols != m.cols())
    throw ShapeError("checkpoint: tensor '" + name + "' is " + std::to_string(t->rows) + "x" +
                     std::to_string(t->cols) + ", model expects " + std::to_string(m.rows()) + "x" +
                     std::to_string(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(t->values[static_cast<std::size_t>(i)]);
}

/// Snapshot of a model (and optionally its optimizer).  `extra` is merged into the header.
template <class T>
CheckpointData make_checkpoint(Model<T>& model, Adam<T>* opt, const nlohmann::json& extra = nlohmann::json::object()) {
  CheckpointData c;
  c.header = extra.is_object() ? extra : nlohmann::json::object();
  c.header["format"] = "lvae-checkpoint";
  c.header["precision"] = std::is_same_v<T, double> ? "float64" : "float32";
  c.header["model"] = model.config();
  model.visit_params([&](nn::Param<T>& p) { c.tensors.push_back(to_named(p.name, p.value)); });
  model.visit_buffers([&](nn::Buffer<T>& b) { c.tensors.push_back(to_named(b.name, b.value)); });
  if (opt) {
    c.header["adam"] = {{"learning_rate", opt->config().learning_rate},
                        {"beta1", opt->config().beta1},
                        {"beta2", opt->config().beta2},
                        {"eps", opt->config().eps},
                        {"steps", opt->steps()}};
    opt->visit_buffers([&](nn::Buffer<T>& b) { c.tensors.push_back(to_named(b.name, b.value)); });
  }
  return c;
}

template <class T>
Model<T> model_from_checkpoint(const CheckpointData& c) {
  if (!c.header.contains("model")) throw FormatError("checkpoint: header has no model config", 0);
  Model<T> model(model_config_from_json(c.header.at("model")));
  model.visit_params([&](nn::Param<T>& p) { from_named(c, p.name, p.value); });
  model.visit_buffers([&](nn::Buffer<T>& b) { from_named(c, b.name, b.value); });
  return model;
}

/// Restores optimizer moments and step count; the optimizer must have been built for `model`.
template <class T>
void restore_optimizer(const CheckpointData& c, Adam<T>& opt) {
  if (!c.header.contains("adam")) throw FormatError("checkpoint: no optimizer state", 0);
  opt.set_steps(c.header.at("adam").at("steps").get<std::int64_t>());
  opt.visit_buffers([&](nn::Buffer<T>& b) { from_named(c, b.name, b.value); });
}

inline AdamConfig adam_config_from_checkpoint(const CheckpointData& c) {
  AdamConfig a;
  if (!c.header.contains("adam")) return a;
  const auto& j = c.header.at("adam");
  a.learning_rate = j.at("learning_rate").get<double>();
  a.beta1 = j.at("beta1").get<double>();
  a.beta2 = j.at("beta2").get<double>();
  a.eps = j.at("eps").get<double>();
  return a;
}

}  // namespace lvae
