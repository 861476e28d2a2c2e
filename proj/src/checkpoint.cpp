#include "ulcerforge/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ulcerforge/error.hpp"

namespace ulcerforge {

static_assert(std::endian::native == std::endian::little,
              "checkpoint codec assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'D', 'F', 'U', 'D'};
const std::string kMomentPrefix1 = "adam.m/";
const std::string kMomentPrefix2 = "adam.v/";

class Writer {
 public:
  void u32(std::uint32_t v) { raw(&v, 4); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  void tensor(const std::string& name, const Shape& shape, const float* values) {
    u32(static_cast<std::uint32_t>(name.size()));
    raw(name.data(), name.size());
    u32(static_cast<std::uint32_t>(shape.size()));
    for (auto d : shape) u32(static_cast<std::uint32_t>(d));
    raw(values, shape_numel(shape) * sizeof(float));
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& b, std::size_t limit) : bytes_(b), limit_(limit) {}
  void raw(void* out, std::size_t n) {
    if (pos_ + n > limit_) throw ParseError("checkpoint: truncated at byte " + std::to_string(pos_));
    std::memcpy(out, bytes_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    raw(&v, 4);
    return v;
  }
  std::string str(std::size_t n) {
    std::string s(n, '\0');
    raw(s.data(), n);
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t limit_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t size) {
  uLong crc = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(crc32(crc, data, static_cast<uInt>(size)));
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kCheckpointVersion);
  const auto& tensors = ckpt.params.tensors;
  const std::size_t count = tensors.size() * (ckpt.optimizer ? 3 : 1);
  w.u32(static_cast<std::uint32_t>(count));
  for (const auto& [name, t] : tensors) w.tensor(name, t.shape(), t.data().data());
  if (ckpt.optimizer) {
    // Moments are sized lazily by the first update; before that they are zero.
    AdamState opt = *ckpt.optimizer;
    if (opt.first_moment.empty() && opt.second_moment.empty()) {
      for (const auto& [name, t] : tensors) {
        opt.first_moment.emplace_back(t.numel(), 0.0f);
        opt.second_moment.emplace_back(t.numel(), 0.0f);
      }
    }
    if (opt.first_moment.size() != tensors.size() || opt.second_moment.size() != tensors.size()) {
      throw DimensionError("checkpoint: optimizer moments do not match parameter count");
    }
    std::size_t i = 0;
    for (const auto& [name, t] : tensors) {
      if (opt.first_moment[i].size() != t.numel() || opt.second_moment[i].size() != t.numel()) {
        throw DimensionError("checkpoint: optimizer moment size mismatch for " + name);
      }
      ++i;
    }
    i = 0;
    for (const auto& [name, t] : tensors) w.tensor(kMomentPrefix1 + name, t.shape(), opt.first_moment[i++].data());
    i = 0;
    for (const auto& [name, t] : tensors) w.tensor(kMomentPrefix2 + name, t.shape(), opt.second_moment[i++].data());
  }

  nlohmann::json footer;
  footer["schedule"] = ckpt.schedule;
  footer["model"] = ckpt.params.config;
  footer["step"] = ckpt.step;
  footer["train"] = ckpt.train;
  if (ckpt.optimizer) {
    const auto& h = ckpt.optimizer->hyper;
    footer["adam"] = {{"step_count", ckpt.optimizer->step_count},
                      {"learning_rate", h.learning_rate},
                      {"beta1", h.beta1},
                      {"beta2", h.beta2},
                      {"eps", h.eps}};
  }
  const std::string text = footer.dump();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.raw(text.data(), text.size());
  w.u32(crc32_of(w.bytes.data(), w.bytes.size()));
  return std::move(w.bytes);
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16) throw ParseError("checkpoint: file too short");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (crc32_of(bytes.data(), bytes.size() - 4) != stored_crc) {
    throw ParseError("checkpoint: checksum mismatch");
  }
  Reader r(bytes, bytes.size() - 4);
  if (r.str(4) != std::string(kMagic, 4)) throw ParseError("checkpoint: bad magic bytes");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw ParseError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  std::map<std::string, Tensor> all;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32());
    Shape shape(r.u32());
    for (auto& d : shape) d = r.u32();
    std::vector<float> values(shape_numel(shape));
    r.raw(values.data(), values.size() * sizeof(float));
    all.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  const std::string text = r.str(r.u32());
  if (r.pos() != bytes.size() - 4) throw ParseError("checkpoint: trailing bytes before checksum");

  nlohmann::json footer;
  try {
    footer = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint: footer is not JSON: ") + e.what());
  }
  Checkpoint ckpt;
  ckpt.schedule = footer.at("schedule").get<ScheduleConfig>();
  ckpt.params.config = footer.at("model").get<UNetConfig>();
  ckpt.step = footer.at("step").get<std::int64_t>();
  ckpt.train = footer.value("train", nlohmann::json::object());

  std::vector<Tensor> m, v;
  for (auto& [name, t] : all) {
    if (name.rfind(kMomentPrefix1, 0) == 0) m.push_back(t);
    else if (name.rfind(kMomentPrefix2, 0) == 0) v.push_back(t);
    else {
      t.set_requires_grad(true);
      ckpt.params.tensors.emplace(name, t);
    }
  }
  for (const auto& spec : parameter_layout(ckpt.params.config)) {
    auto it = ckpt.params.tensors.find(spec.name);
    if (it == ckpt.params.tensors.end()) throw ParseError("checkpoint: missing tensor " + spec.name);
    if (it->second.shape() != spec.shape) {
      throw ParseError("checkpoint: tensor " + spec.name + " has shape " +
                       shape_str(it->second.shape()) + ", model expects " + shape_str(spec.shape));
    }
  }
  if (footer.contains("adam")) {
    const auto& a = footer["adam"];
    if (m.size() != ckpt.params.tensors.size() || v.size() != ckpt.params.tensors.size()) {
      throw ParseError("checkpoint: optimizer moments incomplete");
    }
    AdamState opt;
    opt.step_count = a.at("step_count").get<std::uint64_t>();
    opt.hyper = {a.at("learning_rate").get<double>(), a.at("beta1").get<double>(),
                 a.at("beta2").get<double>(), a.at("eps").get<double>()};
    // Moment maps are keyed "adam.m/<name>", so they iterate in parameter name order.
    for (const auto& t : m) opt.first_moment.emplace_back(t.data().begin(), t.data().end());
    for (const auto& t : v) opt.second_moment.emplace_back(t.data().begin(), t.data().end());
    ckpt.optimizer = std::move(opt);
  }
  return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace ulcerforge
