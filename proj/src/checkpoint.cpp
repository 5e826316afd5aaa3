#include "forge/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>

namespace forge {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

using json = nlohmann::json;

const char* to_string(PayloadEncoding e) {
  switch (e) {
    case PayloadEncoding::dense: return "dense";
    case PayloadEncoding::sparse: return "sparse";
    case PayloadEncoding::quantized: return "quantized";
  }
  return "?";
}

namespace {

constexpr char kMagic[4] = {'A', 'F', 'C', 'K'};
enum IndexMode : std::uint8_t { kAllEntries = 0, kDeltaVarint = 1, kBitmap = 2 };

class Writer {
 public:
  std::vector<unsigned char> buf;

  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const unsigned char*>(&v);
    buf.insert(buf.end(), p, p + sizeof(T));
  }
  void put_bytes(std::span<const unsigned char> b) { buf.insert(buf.end(), b.begin(), b.end()); }
  void put_varint(std::uint64_t v) {
    while (v >= 0x80) {
      buf.push_back(static_cast<unsigned char>(v | 0x80));
      v >>= 7;
    }
    buf.push_back(static_cast<unsigned char>(v));
  }
};

class Reader {
 public:
  Reader(std::span<const unsigned char> b, std::string what) : b_(b), what_(std::move(what)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const unsigned char> get_bytes(std::size_t n) {
    need(n);
    auto s = b_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint64_t get_varint() {
    std::uint64_t v = 0;
    for (int shift = 0; shift < 64; shift += 7) {
      const auto byte = get<std::uint8_t>();
      v |= static_cast<std::uint64_t>(byte & 0x7f) << shift;
      if (!(byte & 0x80)) return v;
    }
    throw FormatError(what_ + ": varint too long at offset " + std::to_string(pos_));
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == b_.size(); }

 private:
  void need(std::size_t n) const {
    if (n > b_.size() - pos_) {
      throw FormatError(what_ + ": truncated at offset " + std::to_string(pos_) + " (need " + std::to_string(n) +
                        " bytes)");
    }
  }
  std::span<const unsigned char> b_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> deflate(std::span<const unsigned char> raw) {
  uLongf len = compressBound(static_cast<uLong>(raw.size()));
  std::vector<unsigned char> out(len);
  if (compress2(out.data(), &len, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK) {
    throw IoError("zlib compression failed");
  }
  out.resize(len);
  return out;
}

std::vector<unsigned char> inflate(std::span<const unsigned char> z, std::size_t raw_len, const std::string& what) {
  std::vector<unsigned char> out(raw_len);
  uLongf len = static_cast<uLongf>(raw_len);
  if (uncompress(out.data(), &len, z.data(), static_cast<uLong>(z.size())) != Z_OK || len != raw_len) {
    throw CorruptionError(what + ": compressed block does not inflate to " + std::to_string(raw_len) + " bytes");
  }
  return out;
}

std::uint32_t crc(std::span<const unsigned char> b) {
  return static_cast<std::uint32_t>(crc32(0L, b.data(), static_cast<uInt>(b.size())));
}

// Positions of stored entries: all, or those not flagged in `pruned`.
std::vector<std::size_t> stored_positions(std::size_t numel, const Mask* pruned) {
  std::vector<std::size_t> pos;
  pos.reserve(numel);
  for (std::size_t i = 0; i < numel; ++i) {
    if (!pruned || !(*pruned)[i]) pos.push_back(i);
  }
  return pos;
}

// Index block: the cheaper of delta varints and a bitmap.
void write_index(Writer& w, std::size_t numel, const std::vector<std::size_t>& pos, bool all) {
  w.put<std::uint64_t>(pos.size());
  if (all) {
    w.put<std::uint8_t>(kAllEntries);
    return;
  }
  Writer deltas;
  std::size_t prev = 0;
  for (std::size_t k = 0; k < pos.size(); ++k) {
    deltas.put_varint(k == 0 ? pos[0] : pos[k] - prev - 1);
    prev = pos[k];
  }
  const std::size_t bitmap_bytes = (numel + 7) / 8;
  if (deltas.buf.size() <= bitmap_bytes) {
    w.put<std::uint8_t>(kDeltaVarint);
    w.put_bytes(deltas.buf);
  } else {
    std::vector<unsigned char> bits(bitmap_bytes, 0);
    for (std::size_t p : pos) bits[p / 8] |= static_cast<unsigned char>(1u << (p % 8));
    w.put<std::uint8_t>(kBitmap);
    w.put_bytes(bits);
  }
}

// `masked` tells whether the writer had a pruned mask (any mode but kAllEntries).
std::vector<std::size_t> read_index(Reader& r, std::size_t numel, const std::string& what, bool& masked) {
  const auto count = r.get<std::uint64_t>();
  if (count > numel) throw CorruptionError(what + ": stores " + std::to_string(count) + " of " + std::to_string(numel));
  const auto mode = r.get<std::uint8_t>();
  masked = mode != kAllEntries;
  std::vector<std::size_t> pos;
  pos.reserve(count);
  if (mode == kAllEntries) {
    if (count != numel) throw CorruptionError(what + ": dense index with a short count");
    for (std::size_t i = 0; i < numel; ++i) pos.push_back(i);
  } else if (mode == kDeltaVarint) {
    std::uint64_t p = 0;
    for (std::uint64_t k = 0; k < count; ++k) {
      const std::uint64_t d = r.get_varint();
      p = k == 0 ? d : p + d + 1;
      if (p >= numel) throw CorruptionError(what + ": index " + std::to_string(p) + " out of range");
      pos.push_back(p);
    }
  } else if (mode == kBitmap) {
    const auto bits = r.get_bytes((numel + 7) / 8);
    for (std::size_t i = 0; i < numel; ++i) {
      if (bits[i / 8] >> (i % 8) & 1u) pos.push_back(i);
    }
    if (pos.size() != count) throw CorruptionError(what + ": bitmap population differs from count");
  } else {
    throw FormatError(what + ": unknown index mode " + std::to_string(mode));
  }
  return pos;
}

json constraint_to_json(const ConstraintSpec& spec) {
  if (const auto* c = std::get_if<Cardinality>(&spec)) return {{"kind", "cardinality"}, {"alpha", c->alpha}};
  if (const auto* c = std::get_if<ColumnGroup>(&spec)) return {{"kind", "columns"}, {"kept", c->kept_columns}};
  const auto& g = std::get<LevelGrid>(spec);
  return {{"kind", "levels"}, {"bit_width", g.bit_width}, {"include_zero", g.include_zero}};
}

ConstraintSpec constraint_from_json(const json& j) {
  const std::string kind = j.at("kind");
  if (kind == "cardinality") return Cardinality{j.at("alpha").get<std::size_t>()};
  if (kind == "columns") return ColumnGroup{j.at("kept").get<std::size_t>()};
  if (kind == "levels") return LevelGrid{j.at("bit_width").get<int>(), j.at("include_zero").get<bool>()};
  throw FormatError("manifest: unknown constraint kind '" + kind + "'");
}

void put_section(Writer& w, const char tag[4], std::span<const unsigned char> payload) {
  w.put_bytes({reinterpret_cast<const unsigned char*>(tag), 4});
  w.put<std::uint64_t>(payload.size());
  w.put_bytes(payload);
}

struct Encoded {
  std::vector<unsigned char> bytes;
  PayloadInfo info;
};

Encoded encode_parameter(const Parameter& p, const Network& net, const CompressionState& state) {
  const Tensor& t = p.value;
  const std::string layer = net.layers()[p.layer].name;
  const Mask* pruned = nullptr;
  const Levels* levels = nullptr;
  if (p.is_weight) {
    if (auto it = state.pruned.find(layer); it != state.pruned.end()) pruned = &it->second;
    if (auto it = state.levels.find(layer); it != state.levels.end()) levels = &it->second;
  }
  Encoded e;
  e.info.parameter = p.name;
  e.info.numel = t.numel();
  Writer w;
  if (!pruned && !levels) {
    e.info.encoding = PayloadEncoding::dense;
    e.info.stored = t.numel();
    w.put<std::uint8_t>(static_cast<std::uint8_t>(PayloadEncoding::dense));
    w.put_bytes({reinterpret_cast<const unsigned char*>(t.data().data()), t.numel() * sizeof(float)});
    e.info.conceptual_bits = 32.0 * static_cast<double>(t.numel());
  } else {
    const auto pos = stored_positions(t.numel(), pruned);
    Writer raw;
    write_index(raw, t.numel(), pos, pruned == nullptr);
    const double index_bits = 8.0 * static_cast<double>(raw.buf.size() - 9);
    e.info.stored = pos.size();
    if (levels) {
      e.info.encoding = PayloadEncoding::quantized;
      for (std::size_t k : pos) {
        const auto it = std::lower_bound(levels->values.begin(), levels->values.end(), t[k]);
        if (it == levels->values.end() || *it != t[k]) {
          throw FeasibilityError(p.name + "[" + std::to_string(k) + "] = " + std::to_string(t[k]) +
                                 " is not on its level grid");
        }
        raw.put<std::uint8_t>(static_cast<std::uint8_t>(it - levels->values.begin()));
      }
      w.put<std::uint8_t>(static_cast<std::uint8_t>(PayloadEncoding::quantized));
      w.put<std::uint32_t>(static_cast<std::uint32_t>(levels->values.size()));
      for (float v : levels->values) w.put<float>(v);
      const double bits = std::max(1.0, std::ceil(std::log2(static_cast<double>(levels->values.size()))));
      e.info.conceptual_bits = bits * static_cast<double>(pos.size()) + index_bits + 32.0 * levels->values.size();
    } else {
      e.info.encoding = PayloadEncoding::sparse;
      // byte planes: sign/exponent bytes of similar weights compress well
      std::vector<unsigned char> planes(4 * pos.size());
      for (std::size_t k = 0; k < pos.size(); ++k) {
        unsigned char b[4];
        std::memcpy(b, &t[pos[k]], 4);
        for (int j = 0; j < 4; ++j) planes[j * pos.size() + k] = b[j];
      }
      raw.put_bytes(planes);
      w.put<std::uint8_t>(static_cast<std::uint8_t>(PayloadEncoding::sparse));
      e.info.conceptual_bits = 32.0 * static_cast<double>(pos.size()) + index_bits;
    }
    w.put<std::uint64_t>(raw.buf.size());
    w.put_bytes(deflate(raw.buf));
  }
  e.bytes = std::move(w.buf);
  e.info.bytes = e.bytes.size();
  return e;
}

void decode_parameter(std::span<const unsigned char> bytes, Tensor& t, const std::string& name,
                      const std::string& layer, CompressionState& state, const json& levels_meta) {
  Reader r(bytes, name);
  const auto enc = static_cast<PayloadEncoding>(r.get<std::uint8_t>());
  if (enc == PayloadEncoding::dense) {
    const auto b = r.get_bytes(t.numel() * sizeof(float));
    std::memcpy(t.data().data(), b.data(), b.size());
  } else if (enc == PayloadEncoding::sparse || enc == PayloadEncoding::quantized) {
    std::vector<float> table;
    if (enc == PayloadEncoding::quantized) {
      const auto m = r.get<std::uint32_t>();
      if (m == 0 || m > 256) throw CorruptionError(name + ": level table of size " + std::to_string(m));
      for (std::uint32_t i = 0; i < m; ++i) table.push_back(r.get<float>());
    }
    const auto raw_len = r.get<std::uint64_t>();
    if (raw_len > (std::uint64_t{1} << 34)) throw CorruptionError(name + ": implausible payload size");
    const auto z = r.get_bytes(bytes.size() - r.pos());
    const auto raw = inflate(z, raw_len, name);
    Reader rr(raw, name);
    bool masked = false;
    const auto pos = read_index(rr, t.numel(), name, masked);
    std::fill(t.data().begin(), t.data().end(), 0.0f);
    if (enc == PayloadEncoding::quantized) {
      for (std::size_t k : pos) {
        const auto code = rr.get<std::uint8_t>();
        if (code >= table.size()) throw CorruptionError(name + ": level index out of range");
        t[k] = table[code];
      }
      Levels lv;
      lv.values = std::move(table);
      lv.scale = levels_meta.at("scale").get<double>();
      lv.bit_width = levels_meta.at("bit_width").get<int>();
      lv.include_zero = levels_meta.at("include_zero").get<bool>();
      lv.degenerate = levels_meta.at("degenerate").get<bool>();
      state.levels[layer] = std::move(lv);
    } else {
      const auto planes = rr.get_bytes(4 * pos.size());
      for (std::size_t k = 0; k < pos.size(); ++k) {
        unsigned char b[4];
        for (int j = 0; j < 4; ++j) b[j] = planes[j * pos.size() + k];
        std::memcpy(&t[pos[k]], b, 4);
      }
    }
    if (!rr.done()) throw CorruptionError(name + ": trailing bytes in payload");
    if (masked) {
      Mask m(t.shape(), 1);
      for (std::size_t k : pos) m[k] = 0;
      state.pruned[layer] = std::move(m);
    }
    return;
  } else {
    throw FormatError(name + ": unknown payload encoding " + std::to_string(static_cast<int>(enc)));
  }
  if (!r.done()) throw CorruptionError(name + ": trailing bytes in payload");
}

}  // namespace

std::string config_hash(const std::map<std::string, std::string>& config) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::string_view s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& [k, v] : config) {
    mix(k);
    mix("=");
    mix(v);
    mix("\n");
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<unsigned char> encode_checkpoint(const Network& net, const CompressionState& state,
                                             const std::map<std::string, std::string>& config,
                                             const std::string& stage, double accuracy, Footprint* footprint) {
  Footprint fp;
  std::vector<Encoded> params;
  for (const auto& p : net.parameters()) {
    params.push_back(encode_parameter(p, net, state));
    fp.dense_bytes += p.value.numel() * sizeof(float);
    fp.payload_bytes += params.back().info.bytes;
    fp.payloads.push_back(params.back().info);
  }

  json m;
  m["format_version"] = kCheckpointVersion;
  m["model"] = net.model_name();
  m["input_shape"] = net.input_shape();
  m["classes"] = net.classes();
  m["init_seed"] = net.init_seed();
  m["stage"] = stage;
  m["accuracy"] = accuracy;
  m["config"] = config;
  m["config_hash"] = config_hash(config);
  json layers = json::array();
  for (const auto& l : net.layers()) {
    layers.push_back({{"kind", std::string(to_string(l.kind))},
                      {"name", l.name},
                      {"in", l.in},
                      {"out", l.out},
                      {"kernel", l.kernel},
                      {"stride", l.stride},
                      {"padding", l.padding},
                      {"compressible", l.compressible}});
  }
  m["layers"] = layers;
  json cons = json::object(), lvls = json::object(), pruned = json::array();
  for (const auto& [layer, spec] : state.constraints) cons[layer] = constraint_to_json(spec);
  for (const auto& [layer, lv] : state.levels) {
    lvls[layer] = {{"scale", lv.scale},
                   {"bit_width", lv.bit_width},
                   {"include_zero", lv.include_zero},
                   {"degenerate", lv.degenerate}};
  }
  for (const auto& [layer, mask] : state.pruned) pruned.push_back(layer);
  m["state"] = {{"constraints", cons}, {"levels", lvls}, {"pruned_layers", pruned}};
  json pj = json::array();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& in = params[i].info;
    pj.push_back({{"name", in.parameter},
                  {"shape", net.parameters()[i].value.shape()},
                  {"encoding", to_string(in.encoding)},
                  {"stored", in.stored},
                  {"bytes", in.bytes},
                  {"conceptual_bits", in.conceptual_bits}});
  }
  m["parameters"] = pj;
  m["footprint"] = {{"dense_bytes", fp.dense_bytes},
                    {"payload_bytes", fp.payload_bytes},
                    {"note",
                     "quantized payloads store one byte per level index; conceptual_bits counts ceil(log2 levels) "
                     "bits per index plus the index and level-table overhead"}};

  Writer w;
  w.put_bytes({reinterpret_cast<const unsigned char*>(kMagic), 4});
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string manifest = m.dump(1);
  put_section(w, "MANI", {reinterpret_cast<const unsigned char*>(manifest.data()), manifest.size()});
  for (const auto& e : params) put_section(w, "PARM", e.bytes);
  w.put<std::uint32_t>(crc(w.buf));
  fp.file_bytes = w.buf.size();
  if (footprint) *footprint = fp;
  return std::move(w.buf);
}

Footprint save_checkpoint(const std::filesystem::path& path, const Network& net, const CompressionState& state,
                          const std::map<std::string, std::string>& config, const std::string& stage,
                          double accuracy) {
  Footprint fp;
  const auto bytes = encode_checkpoint(net, state, config, stage, accuracy, &fp);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + tmp.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
  return fp;
}

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  if (bytes.size() < 12) throw FormatError("checkpoint: file of " + std::to_string(bytes.size()) + " bytes is too short");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic at offset 0");
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  const auto body = bytes.first(bytes.size() - 4);
  if (crc(body) != stored_crc) throw CorruptionError("checkpoint: CRC mismatch, the file is damaged");
  Reader r(body, "checkpoint");
  r.get_bytes(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) + " is not supported (this build reads " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  auto section = [&r](const char* want) {
    const auto tag = r.get_bytes(4);
    if (std::memcmp(tag.data(), want, 4) != 0) {
      throw FormatError("checkpoint: expected section " + std::string(want, 4) + " at offset " +
                        std::to_string(r.pos() - 4));
    }
    return r.get_bytes(r.get<std::uint64_t>());
  };
  const auto mani = section("MANI");
  json m;
  try {
    m = json::parse(mani.begin(), mani.end());
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }

  try {
    std::vector<LayerSpec> layers;
    for (const auto& l : m.at("layers")) {
      LayerSpec s;
      s.kind = parse_layer_kind(l.at("kind").get<std::string>());
      s.name = l.at("name");
      s.in = l.at("in");
      s.out = l.at("out");
      s.kernel = l.at("kernel");
      s.stride = l.at("stride");
      s.padding = l.at("padding");
      s.compressible = l.at("compressible");
      layers.push_back(std::move(s));
    }
    Network net(m.at("model").get<std::string>(), std::move(layers), m.at("input_shape").get<Shape>(),
                m.at("classes").get<std::size_t>());
    net.initialize(m.at("init_seed").get<std::uint64_t>());

    CompressionState state;
    for (const auto& [layer, spec] : m.at("state").at("constraints").items()) {
      state.constraints[layer] = constraint_from_json(spec);
    }
    const json& levels_meta = m.at("state").at("levels");
    const json& params = m.at("parameters");
    if (params.size() != net.parameters().size()) throw FormatError("checkpoint: parameter count mismatch");
    Footprint fp;
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = net.parameters()[i];
      if (params[i].at("name").get<std::string>() != p.name || params[i].at("shape").get<Shape>() != p.value.shape()) {
        throw FormatError("checkpoint: parameter " + std::to_string(i) + " does not match the layer table");
      }
      const auto payload = section("PARM");
      const std::string layer = net.layers()[p.layer].name;
      const json lm = levels_meta.contains(layer) ? levels_meta.at(layer) : json::object();
      decode_parameter(payload, p.value, p.name, layer, state, lm);
      PayloadInfo info;
      info.parameter = p.name;
      info.encoding = static_cast<PayloadEncoding>(payload[0]);
      info.numel = p.value.numel();
      info.stored = params[i].at("stored");
      info.bytes = payload.size();
      info.conceptual_bits = params[i].at("conceptual_bits");
      fp.payloads.push_back(info);
      fp.dense_bytes += p.value.numel() * sizeof(float);
      fp.payload_bytes += payload.size();
    }
    if (!r.done()) throw FormatError("checkpoint: trailing data at offset " + std::to_string(r.pos()));
    fp.file_bytes = bytes.size();
    for (const auto& [layer, lv] : state.levels) {
      if (!levels_meta.contains(layer)) throw FormatError("checkpoint: level table for " + layer + " has no metadata");
    }
    return Checkpoint{std::move(net),
                      std::move(state),
                      m.at("config").get<std::map<std::string, std::string>>(),
                      m.at("stage").get<std::string>(),
                      m.at("accuracy").get<double>(),
                      m.at("config_hash").get<std::string>(),
                      std::move(fp)};
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint manifest: ") + e.what());
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace forge
