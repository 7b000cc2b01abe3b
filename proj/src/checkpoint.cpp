#include "dprune/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "dprune/error.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace dprune {

namespace {

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<std::uint8_t>& out() { return out_; }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  void bytes(void* dst, std::size_t n) {
    if (n > n_ - pos_) fail(ErrorCode::kIntegrity, "checkpoint truncated");
    std::memcpy(dst, p_ + pos_, n);
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
  std::string str() {
    const std::uint32_t n = u32();
    if (n > n_ - pos_) fail(ErrorCode::kIntegrity, "checkpoint truncated");
    std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == n_; }

 private:
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

std::string join_ints(const std::vector<int>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

std::vector<int> split_ints(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      fail(ErrorCode::kIntegrity, "checkpoint record: bad integer list '" + s + "'");
    }
  }
  return out;
}

std::string format_f64(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string config_record(const TransformerModel& model, const Metadata& meta) {
  const auto& c = model.config;
  std::ostringstream r;
  r << "model.vocab_size=" << c.vocab_size << "\n"
    << "model.d_model=" << c.d_model << "\n"
    << "model.n_heads=" << c.n_heads << "\n"
    << "model.d_ff=" << c.d_ff << "\n"
    << "model.n_layers=" << c.n_layers << "\n"
    << "model.max_seq=" << c.max_seq << "\n"
    << "model.norm_eps=" << format_f64(c.norm_eps) << "\n"
    << "model.proj_init_std=" << format_f64(c.proj_init_std) << "\n"
    << "model.seed=" << c.seed << "\n"
    << "live.channels=" << join_ints(model.live_channels) << "\n";
  for (std::size_t l = 0; l < model.live_heads.size(); ++l) {
    r << "live.heads." << l << "=" << join_ints(model.live_heads[l]) << "\n";
    r << "live.ffn." << l << "=" << join_ints(model.live_ffn[l]) << "\n";
  }
  for (const auto& [name, a] : model.adapters) {
    r << "adapter." << name << ".rank=" << a.rank << "\n";
    r << "adapter." << name << ".alpha=" << format_f64(a.alpha) << "\n";
  }
  for (const auto& [k, v] : meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      fail(ErrorCode::kContract, "checkpoint metadata keys/values must be single-line");
    }
    r << "meta." << k << "=" << v << "\n";
  }
  return r.str();
}

std::map<std::string, std::string> parse_record(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::stringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) fail(ErrorCode::kIntegrity, "checkpoint record: malformed line");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return kv;
}

std::uint32_t crc_of(const std::uint8_t* p, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; checkpoints here stay far below 4 GiB.
  return static_cast<std::uint32_t>(crc32(crc, p, static_cast<uInt>(n)));
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const TransformerModel& model, const Metadata& meta) {
  Writer w;
  w.bytes("DPRN", 4);
  w.u32(kCheckpointVersion);
  w.str(config_record(model, meta));
  auto params = model.parameters();
  std::vector<NamedTensor> all(params.begin(), params.end());
  for (const auto& [name, a] : model.adapters) {
    all.push_back({"adapter." + name + ".p", a.p});
    all.push_back({"adapter." + name + ".q", a.q});
  }
  w.u32(static_cast<std::uint32_t>(all.size()));
  for (const auto& nt : all) {
    w.str(nt.name);
    w.u32(static_cast<std::uint32_t>(nt.tensor.rank()));
    for (auto d : nt.tensor.shape()) w.u64(d);
    w.bytes(nt.tensor.data().data(), nt.tensor.numel() * sizeof(double));
  }
  const std::uint32_t crc = crc_of(w.out().data(), w.out().size());
  w.u32(crc);
  return std::move(w.out());
}

TransformerModel deserialize_checkpoint(const std::vector<std::uint8_t>& bytes, Metadata* meta) {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "DPRN", 4) != 0) {
    fail(ErrorCode::kIntegrity, "not a checkpoint (bad magic)");
  }
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion) {
    fail(ErrorCode::kVersion, "checkpoint version " + std::to_string(version) + ", expected " +
                                  std::to_string(kCheckpointVersion));
  }
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + body, 4);
  if (crc_of(bytes.data(), body) != stored) fail(ErrorCode::kIntegrity, "checkpoint CRC mismatch");

  Reader r(bytes.data() + 8, body - 8);
  auto kv = parse_record(r.str());
  auto need = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) fail(ErrorCode::kIntegrity, "checkpoint record lacks '" + k + "'");
    return it->second;
  };
  auto to_int = [&](const std::string& k) {
    try {
      return std::stoi(need(k));
    } catch (const std::invalid_argument&) {
      fail(ErrorCode::kIntegrity, "checkpoint record: bad value for '" + k + "'");
    }
  };

  TransformerModel m;
  m.config.vocab_size = to_int("model.vocab_size");
  m.config.d_model = to_int("model.d_model");
  m.config.n_heads = to_int("model.n_heads");
  m.config.d_ff = to_int("model.d_ff");
  m.config.n_layers = to_int("model.n_layers");
  m.config.max_seq = to_int("model.max_seq");
  m.config.norm_eps = std::stod(need("model.norm_eps"));
  m.config.proj_init_std = std::stod(need("model.proj_init_std"));
  m.config.seed = std::stoull(need("model.seed"));
  m.config.validate();
  m.live_channels = split_ints(need("live.channels"));
  for (int l = 0; l < m.config.n_layers; ++l) {
    m.live_heads.push_back(split_ints(need("live.heads." + std::to_string(l))));
    m.live_ffn.push_back(split_ints(need("live.ffn." + std::to_string(l))));
  }

  std::map<std::string, Tensor> tensors;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 2) fail(ErrorCode::kIntegrity, "tensor '" + name + "' has rank " + std::to_string(rank));
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      const std::uint64_t d = r.u64();
      if (d > (1ULL << 32)) fail(ErrorCode::kIntegrity, "tensor '" + name + "' has an absurd dimension");
      shape.push_back(static_cast<std::size_t>(d));
      numel *= static_cast<std::size_t>(d);
    }
    std::vector<double> data(numel);
    r.bytes(data.data(), numel * sizeof(double));
    if (!tensors.emplace(name, Tensor::from(shape, std::move(data))).second) {
      fail(ErrorCode::kIntegrity, "duplicate tensor name '" + name + "'");
    }
  }
  if (!r.done()) fail(ErrorCode::kIntegrity, "trailing bytes after tensor table");

  auto take = [&](const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) fail(ErrorCode::kIntegrity, "checkpoint lacks tensor '" + name + "'");
    Tensor t = it->second;
    tensors.erase(it);
    return t;
  };
  m.tok_emb = take("tok_emb");
  m.pos_emb = take("pos_emb");
  for (int l = 0; l < m.config.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    LayerWeights w;
    w.attn_norm = take(p + "attn_norm");
    w.wq = take(p + "wq");
    w.wk = take(p + "wk");
    w.wv = take(p + "wv");
    w.wo = take(p + "wo");
    w.mlp_norm = take(p + "mlp_norm");
    w.w_gate = take(p + "w_gate");
    w.w_up = take(p + "w_up");
    w.w_down = take(p + "w_down");
    m.layers.push_back(std::move(w));
  }
  m.final_norm = take("final_norm");
  m.lm_head = take("lm_head");

  for (const auto& [k, v] : kv) {
    const std::string suffix = ".rank";
    if (k.rfind("adapter.", 0) != 0 || k.size() <= suffix.size() ||
        k.compare(k.size() - suffix.size(), suffix.size(), suffix) != 0) {
      continue;
    }
    const std::string target = k.substr(8, k.size() - 8 - suffix.size());
    LoraAdapter a;
    a.target = target;
    a.rank = std::stoi(v);
    a.alpha = std::stod(need("adapter." + target + ".alpha"));
    a.p = take("adapter." + target + ".p");
    a.q = take("adapter." + target + ".q");
    m.adapters.emplace(target, std::move(a));
  }
  if (!tensors.empty()) fail(ErrorCode::kIntegrity, "unexpected tensor '" + tensors.begin()->first + "'");

  if (meta) {
    meta->clear();
    for (const auto& [k, v] : kv) {
      if (k.rfind("meta.", 0) == 0) (*meta)[k.substr(5)] = v;
    }
  }
  return m;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot read '" + path + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

namespace {
void write_raw(const std::string& path, const char* data, std::size_t n) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::kIo, "cannot write '" + tmp + "'");
    out.write(data, static_cast<std::streamsize>(n));
    if (!out) fail(ErrorCode::kIo, "short write to '" + tmp + "'");
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) fail(ErrorCode::kIo, "cannot rename onto '" + path + "'");
}
}  // namespace

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  write_raw(path, reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

void write_file(const std::string& path, const std::string& text) {
  write_raw(path, text.data(), text.size());
}

void save_checkpoint(const TransformerModel& model, const std::string& path, const Metadata& meta) {
  write_file(path, serialize_checkpoint(model, meta));
}

TransformerModel load_checkpoint(const std::string& path, Metadata* meta) {
  return deserialize_checkpoint(read_file(path), meta);
}

}  // namespace dprune
