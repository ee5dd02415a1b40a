#include "eres/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace eres {

const StoredTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

const std::string& Checkpoint::value(const std::string& key) const {
  for (const auto& [k, v] : meta) {
    if (k == key) return v;
  }
  throw ParseError("checkpoint metadata lacks key '" + key + "'", 0);
}

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) { put(v, 2); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void bytes(const std::string& s) { out_.insert(out_.end(), s.begin(), s.end()); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return b_.size() - pos_; }

  void need(std::size_t n, const std::string& what) const {
    if (remaining() < n) {
      throw ParseError("truncated checkpoint: " + what + " needs " + std::to_string(n) + " bytes, " +
                           std::to_string(remaining()) + " left",
                       pos_);
    }
  }
  std::uint64_t get(int n, const std::string& what) {
    need(static_cast<std::size_t>(n), what);
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::string str(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

constexpr std::size_t kMaxRank = 8;

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
  Writer w;
  w.bytes("ERES");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& t : c.tensors) {
    if (t.name.size() > 0xFFFF) throw ConfigError("tensor name too long: " + t.name);
    if (t.dims.size() > kMaxRank) throw ShapeError("tensor " + t.name + " has rank above 8");
    if (shape_size(t.dims) != t.values.size()) {
      throw ShapeError("tensor " + t.name + " holds " + std::to_string(t.values.size()) +
                       " values for shape " + shape_str(t.dims));
    }
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.bytes(t.name);
    w.u8(static_cast<std::uint8_t>(t.dtype));
    w.u8(static_cast<std::uint8_t>(t.dims.size()));
    for (std::size_t d : t.dims) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.values) {
      if (t.dtype == DType::kF32) {
        w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        w.u64(std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  std::string text;
  for (const auto& [k, v] : c.meta) text += k + " = " + v + "\n";
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.bytes(text);
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  if (r.str(4, "magic") != "ERES") throw ParseError("bad magic, not an ERES checkpoint", 0);
  const std::size_t version_at = r.offset();
  const auto version = static_cast<std::uint32_t>(r.get(4, "version"));
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  const auto count = static_cast<std::uint32_t>(r.get(4, "tensor count"));
  Checkpoint c;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string which = "tensor " + std::to_string(i);
    StoredTensor t;
    const auto len = static_cast<std::size_t>(r.get(2, which + " name length"));
    t.name = r.str(len, which + " name");
    const std::size_t dtype_at = r.offset();
    const auto dtype = static_cast<std::uint8_t>(r.get(1, which + " dtype"));
    if (dtype > 1) throw ParseError(which + " ('" + t.name + "') has unknown dtype " + std::to_string(dtype), dtype_at);
    t.dtype = static_cast<DType>(dtype);
    const std::size_t rank_at = r.offset();
    const auto rank = static_cast<std::size_t>(r.get(1, which + " rank"));
    if (rank > kMaxRank) throw ParseError(which + " has rank " + std::to_string(rank), rank_at);
    std::size_t n = 1;
    for (std::size_t d = 0; d < rank; ++d) {
      t.dims.push_back(static_cast<std::size_t>(r.get(4, which + " dims")));
      n *= t.dims.back();
    }
    const std::size_t width = t.dtype == DType::kF32 ? 4 : 8;
    if (n > r.remaining() / width) r.need(n * width, which + " ('" + t.name + "') data");
    t.values.resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      if (t.dtype == DType::kF32) {
        t.values[j] = std::bit_cast<float>(static_cast<std::uint32_t>(r.get(4, "data")));
      } else {
        t.values[j] = std::bit_cast<double>(r.get(8, "data"));
      }
    }
    c.tensors.push_back(std::move(t));
  }
  const auto meta_len = static_cast<std::size_t>(r.get(4, "metadata length"));
  const std::size_t meta_at = r.offset();
  const std::string text = r.str(meta_len, "metadata");
  if (r.remaining() != 0) throw ParseError("trailing bytes after metadata", r.offset());
  std::stringstream ss(text);
  std::string line;
  std::size_t at = meta_at;
  while (std::getline(ss, line)) {
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw ParseError("malformed metadata line '" + line + "'", at);
    c.meta.emplace_back(line.substr(0, eq), line.substr(eq + 3));
    at += line.size() + 1;
  }
  return c;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const auto bytes = encode_checkpoint(c);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

// ---------------------------------------------------------------------------
// Model <-> checkpoint
// ---------------------------------------------------------------------------

namespace {

std::string join_reals(const std::vector<double>& v) {
  std::string out;
  for (double x : v) {
    if (!out.empty()) out += ',';
    out += format_real(x);
  }
  return out;
}

std::vector<double> split_reals(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stod(item));
  }
  return out;
}

std::string encode_block(const BlockSpec& b) {
  std::ostringstream o;
  o << "origin=" << b.origin << " group=" << b.group << " in=" << b.in_channels
    << " out=" << b.out_channels << " stride=" << b.stride << " gated=" << (b.gated ? 1 : 0)
    << " state=" << to_string(b.status.state) << " collapsed_epoch=" << b.status.collapsed_epoch
    << " history=" << join_reals(b.status.gate_off_history);
  return o.str();
}

BlockSpec decode_block(const std::string& s) {
  BlockSpec b;
  std::istringstream in(s);
  std::string tok;
  int fields = 0;
  try {
    while (in >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw ParseError("malformed block entry '" + s + "'", 0);
      const std::string k = tok.substr(0, eq);
      const std::string v = tok.substr(eq + 1);
      ++fields;
      if (k == "origin") b.origin = std::stoul(v);
      else if (k == "group") b.group = std::stoi(v);
      else if (k == "in") b.in_channels = std::stoul(v);
      else if (k == "out") b.out_channels = std::stoul(v);
      else if (k == "stride") b.stride = std::stoul(v);
      else if (k == "gated") b.gated = v == "1";
      else if (k == "state") b.status.state = parse_block_state(v);
      else if (k == "collapsed_epoch") b.status.collapsed_epoch = std::stoi(v);
      else if (k == "history") b.status.gate_off_history = split_reals(v);
      else throw ParseError("unknown block field '" + k + "'", 0);
    }
  } catch (const std::logic_error&) {
    throw ParseError("malformed block entry '" + s + "'", 0);
  }
  if (fields != 9) throw ParseError("incomplete block entry '" + s + "'", 0);
  return b;
}

const char* lr_phase_name(LrPolicy::Phase p) {
  return p == LrPolicy::Phase::kStandard ? "standard" : "adaptive";
}

}  // namespace

template <typename T>
Checkpoint make_checkpoint(Model<T>& model, const RunConfig& cfg, const RunState& state,
                           const std::map<std::string, Tensor<T>>* velocity) {
  Checkpoint c;
  const DType dtype = sizeof(T) == 4 ? DType::kF32 : DType::kF64;
  auto store = [&](const std::string& name, const Tensor<T>& t) {
    c.tensors.push_back({name, dtype, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
  };
  for (const auto& nt : model.named_tensors()) store(nt.name, *nt.tensor);
  if (velocity) {
    for (const auto& [name, v] : *velocity) store(name + "_velocity", v);
  }

  RunConfig resolved = cfg;
  resolved.net = model.spec();
  resolved.dtype = sizeof(T) == 4 ? "f32" : "f64";
  c.meta = resolved.to_kv();
  c.meta.emplace_back("state.epoch", std::to_string(state.next_epoch));
  c.meta.emplace_back("state.lr_phase", lr_phase_name(state.lr.phase));
  c.meta.emplace_back("state.lr_reset_epoch", std::to_string(state.lr.reset_epoch));
  c.meta.emplace_back("state.norm_mean", join_reals(state.norm.mean));
  c.meta.emplace_back("state.norm_std", join_reals(state.norm.std));
  c.meta.emplace_back("state.side_tap", std::to_string(model.side_tap()));
  c.meta.emplace_back("state.blocks", std::to_string(model.blocks().size()));
  for (std::size_t i = 0; i < model.blocks().size(); ++i) {
    c.meta.emplace_back("state.block." + std::to_string(i), encode_block(model.blocks()[i].spec));
  }
  c.meta.emplace_back("state.pruned", std::to_string(model.pruned().size()));
  for (std::size_t i = 0; i < model.pruned().size(); ++i) {
    c.meta.emplace_back("state.pruned." + std::to_string(i), encode_block(model.pruned()[i]));
  }
  return c;
}

template <typename T>
Restored<T> restore_checkpoint(const Checkpoint& c) {
  RunConfig cfg;
  try {
    cfg = RunConfig::from_kv(c.meta, RunConfig{}, {"state."});
  } catch (const ConfigError& e) {
    throw ParseError(std::string("checkpoint metadata: ") + e.what(), 0);
  }
  RunState state;
  std::vector<BlockSpec> blocks;
  std::vector<BlockSpec> pruned;
  std::size_t side_tap = 0;
  try {
    state.next_epoch = std::stoi(c.value("state.epoch"));
    state.lr = cfg.train.lr;
    state.lr.phase = c.value("state.lr_phase") == "adaptive" ? LrPolicy::Phase::kAdaptive
                                                             : LrPolicy::Phase::kStandard;
    state.lr.reset_epoch = std::stoi(c.value("state.lr_reset_epoch"));
    state.norm.mean = split_reals(c.value("state.norm_mean"));
    state.norm.std = split_reals(c.value("state.norm_std"));

    const std::size_t nb = std::stoul(c.value("state.blocks"));
    for (std::size_t i = 0; i < nb; ++i) blocks.push_back(decode_block(c.value("state.block." + std::to_string(i))));
    const std::size_t np = std::stoul(c.value("state.pruned"));
    for (std::size_t i = 0; i < np; ++i) pruned.push_back(decode_block(c.value("state.pruned." + std::to_string(i))));
    side_tap = std::stoul(c.value("state.side_tap"));
  } catch (const std::logic_error&) {
    throw ParseError("malformed run state in checkpoint metadata", 0);
  }

  Restored<T> out{Model<T>::assemble(cfg.net, blocks, pruned, side_tap), cfg, state, {}};
  auto load = [&](const std::string& name, Tensor<T>& dst) {
    const StoredTensor* t = c.find(name);
    if (!t) throw ParseError("checkpoint lacks tensor '" + name + "'", 0);
    if (t->dims != dst.shape()) {
      throw ParseError("tensor '" + name + "' has shape " + shape_str(t->dims) + ", model expects " +
                           shape_str(dst.shape()),
                       0);
    }
    for (std::size_t i = 0; i < t->values.size(); ++i) dst[i] = static_cast<T>(t->values[i]);
  };
  for (auto& nt : out.model.named_tensors()) {
    load(nt.name, *nt.tensor);
    if (nt.kind == TensorKind::kBuffer) continue;
    const std::string vname = nt.name + "_velocity";
    if (c.find(vname)) {
      Tensor<T> v(nt.tensor->shape());
      load(vname, v);
      out.velocity.emplace(nt.name, std::move(v));
    }
  }
  return out;
}

template Checkpoint make_checkpoint(Model<float>&, const RunConfig&, const RunState&,
                                    const std::map<std::string, Tensor<float>>*);
template Checkpoint make_checkpoint(Model<double>&, const RunConfig&, const RunState&,
                                    const std::map<std::string, Tensor<double>>*);
template Restored<float> restore_checkpoint(const Checkpoint&);
template Restored<double> restore_checkpoint(const Checkpoint&);

}  // namespace eres
