#include "flownav/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>

#include "flownav/errors.hpp"

namespace flownav {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'F', 'L', 'O', 'W', 'N', 'A', 'V', '\0'};

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::ofstream& out, const std::string& s) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  Reader(std::ifstream& in, std::string source) : in_(in), source_(std::move(source)) {}

  template <class T>
  T get() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) throw DataError(source_ + ": truncated checkpoint");
    return v;
  }

  std::string get_string() {
    const auto n = get<std::uint32_t>();
    if (n > (1u << 20)) throw DataError(source_ + ": implausible string length " + std::to_string(n));
    std::string s(n, '\0');
    in_.read(s.data(), n);
    if (!in_) throw DataError(source_ + ": truncated checkpoint");
    return s;
  }

  void get_doubles(std::vector<double>& v) {
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in_) throw DataError(source_ + ": truncated checkpoint");
  }

 private:
  std::ifstream& in_;
  std::string source_;
};

std::size_t meta_size(const Checkpoint& c, const std::string& key) {
  const auto it = c.metadata.find(key);
  if (it == c.metadata.end()) return 0;
  return static_cast<std::size_t>(std::stoull(it->second));
}

}  // namespace

const ad::Tensor* Checkpoint::find(const std::string& name) const {
  const auto it = std::find_if(tensors.begin(), tensors.end(), [&](const auto& nt) { return nt.first == name; });
  return it == tensors.end() ? nullptr : &it->second;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  const auto& c = ckpt.config;
  for (const std::size_t v : {c.n_layers, c.n_heads, c.d_model, c.d_ff, c.vocab_size, c.max_seq_len, c.gnn_insert_layer})
    put<std::uint64_t>(out, v);
  put<std::uint8_t>(out, c.tie_lm_head ? 1 : 0);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.metadata.size()));
  for (const auto& [k, v] : ckpt.metadata) {
    put_string(out, k);
    put_string(out, v);
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    put_string(out, name);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (const auto d : t.shape()) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  if (!out) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  Reader r(in, path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw DataError(path.string() + ": not a flownav checkpoint");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw DataError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ckpt;
  auto& c = ckpt.config;
  for (std::size_t* field : {&c.n_layers, &c.n_heads, &c.d_model, &c.d_ff, &c.vocab_size, &c.max_seq_len, &c.gnn_insert_layer})
    *field = static_cast<std::size_t>(r.get<std::uint64_t>());
  c.tie_lm_head = r.get<std::uint8_t>() != 0;
  const auto n_meta = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    auto k = r.get_string();
    ckpt.metadata[k] = r.get_string();
  }
  const auto n_tensors = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    auto name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank > 2) throw DataError(path.string() + ": tensor '" + name + "' has rank " + std::to_string(rank));
    ad::Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    std::vector<double> values(ad::shape_numel(shape));
    r.get_doubles(values);
    ckpt.tensors.emplace_back(std::move(name), ad::Tensor::from(std::move(shape), std::move(values)));
  }
  return ckpt;
}

Checkpoint make_checkpoint(const model::Model& m, const gnn::GnnParams* gnn_params,
                           std::map<std::string, std::string> metadata) {
  Checkpoint ckpt;
  ckpt.config = m.config;
  ckpt.metadata = std::move(metadata);
  if (m.lora) {
    ckpt.metadata["lora.rank"] = std::to_string(m.lora->rank);
    // Hex float keeps alpha exact.
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%a", m.lora->alpha);
    ckpt.metadata["lora.alpha"] = buf;
  }
  if (m.prefix) ckpt.metadata["prefix.n_virtual"] = std::to_string(m.prefix->n_virtual);
  if (m.adapter) ckpt.metadata["adapter.bottleneck"] = std::to_string(m.adapter->bottleneck);
  for (auto& [name, t] : m.named_parameters()) ckpt.tensors.emplace_back(name, t.clone());
  if (gnn_params) {
    ckpt.metadata["gnn.kind"] = std::string(gnn::to_string(gnn_params->kind));
    ckpt.tensors.emplace_back("gnn.weight", gnn_params->weight.clone());
    ckpt.tensors.emplace_back("gnn.bias", gnn_params->bias.clone());
  }
  return ckpt;
}

model::Model model_from_checkpoint(const Checkpoint& ckpt) {
  model::Model m;
  m.config = ckpt.config;
  m.config.validate();
  m.backbone = model::TransformerParams::init(m.config, 0);
  const auto d = m.config.d_model;
  const auto L = m.config.n_layers;
  auto zeros = [](ad::Shape s) { return ad::Tensor::zeros(std::move(s)); };
  if (const auto r = meta_size(ckpt, "lora.rank")) {
    model::LoraParams lp{r, std::strtod(ckpt.metadata.at("lora.alpha").c_str(), nullptr), {}};
    for (std::size_t l = 0; l < L; ++l) lp.layers.push_back({zeros({d, r}), zeros({r, d}), zeros({d, r}), zeros({r, d})});
    m.lora = std::move(lp);
  }
  if (const auto p = meta_size(ckpt, "prefix.n_virtual")) {
    model::PrefixParams pp{p, {}};
    for (std::size_t l = 0; l < L; ++l) pp.layers.push_back({zeros({p, d}), zeros({p, d})});
    m.prefix = std::move(pp);
  }
  if (const auto b = meta_size(ckpt, "adapter.bottleneck")) {
    model::AdapterParams ap{b, {}};
    for (std::size_t l = 0; l < L; ++l) ap.layers.push_back({{zeros({d, b}), zeros({b})}, {zeros({b, d}), zeros({d})}});
    m.adapter = std::move(ap);
  }
  for (auto& [name, t] : m.named_parameters()) {
    const auto* src = ckpt.find(name);
    if (!src) throw DataError("checkpoint lacks tensor '" + name + "'");
    if (src->shape() != t.shape()) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + ad::shape_str(src->shape()) + ", expected " +
                      ad::shape_str(t.shape()));
    }
    auto dst = t;
    std::copy(src->data().begin(), src->data().end(), dst.mutable_data().begin());
  }
  return m;
}

std::optional<gnn::GnnParams> gnn_from_checkpoint(const Checkpoint& ckpt) {
  const auto* w = ckpt.find("gnn.weight");
  const auto* b = ckpt.find("gnn.bias");
  if (!w || !b) return std::nullopt;
  const auto it = ckpt.metadata.find("gnn.kind");
  if (it == ckpt.metadata.end()) throw DataError("checkpoint has gnn tensors but no gnn.kind");
  gnn::GnnParams p;
  p.kind = gnn::parse_kind(it->second);
  p.weight = w->clone();
  p.bias = b->clone();
  if (p.parameter_count() != gnn::GnnParams::expected_count(p.kind, p.d_model())) {
    throw DataError("checkpoint gnn tensors do not match kind " + it->second);
  }
  return p;
}

}  // namespace flownav
