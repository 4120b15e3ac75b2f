#include "germtl/model.hpp"

#include <cstdio>
#include <fstream>
#include <random>

#include <json.hpp>

#include "germtl/errors.hpp"
#include "germtl/hashing.hpp"

namespace germtl {

using json = nlohmann::json;

std::string hex_digest(std::string_view bytes) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
  return buf;
}

std::string_view task_name(Task task) {
  switch (task) {
    case Task::Toxic:
      return "toxic";
    case Task::Engaging:
      return "engage";
    case Task::FactClaiming:
      return "fact";
  }
  return "?";
}

Task parse_task(std::string_view name) {
  for (Task t : kAllTasks)
    if (task_name(t) == name) return t;
  throw ConfigError("unknown task '" + std::string(name) + "' (expected toxic, engage or fact)");
}

std::string_view environment_name(Environment env) {
  return env == Environment::STL ? "STL" : "MTL";
}

Environment parse_environment(std::string_view name) {
  if (name == "STL" || name == "stl") return Environment::STL;
  if (name == "MTL" || name == "mtl") return Environment::MTL;
  throw ConfigError("unknown environment '" + std::string(name) + "' (expected stl or mtl)");
}

void EncoderConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("encoder config: " + m); };
  if (vocab_size <= kNumSpecial) fail("vocab_size must exceed the special tokens");
  if (d_model <= 0 || n_layers < 0 || n_heads <= 0 || d_ff <= 0) fail("dimensions must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (max_seq_len < 3) fail("max_seq_len must be at least 3");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
}

// ---- parameters ------------------------------------------------------------

namespace {

constexpr double kInitStd = 0.02;

Tensor weight(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  return Tensor::truncated_normal({r, c}, kInitStd, rng, true);
}
Tensor zeros(std::size_t n) { return Tensor::zeros({n}, true); }
Tensor ones(std::size_t n) { return Tensor::full({n}, 1.0, true); }

ClassificationHead make_head(std::size_t d, std::mt19937_64& rng) {
  return {weight(d, 2, rng), zeros(2)};
}

ModelParams init_encoder(const EncoderConfig& cfg, bool with_mlm_head, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto ff = static_cast<std::size_t>(cfg.d_ff);
  ModelParams p;
  p.config = cfg;
  p.token_embedding = weight(V, d, rng);
  p.position_embedding = weight(static_cast<std::size_t>(cfg.max_seq_len), d, rng);
  p.embedding_ln_gamma = ones(d);
  p.embedding_ln_beta = zeros(d);
  for (int l = 0; l < cfg.n_layers; ++l) {
    EncoderLayer L;
    L.wq = weight(d, d, rng);
    L.bq = zeros(d);
    L.wk = weight(d, d, rng);
    L.bk = zeros(d);
    L.wv = weight(d, d, rng);
    L.bv = zeros(d);
    L.wo = weight(d, d, rng);
    L.bo = zeros(d);
    L.attn_ln_gamma = ones(d);
    L.attn_ln_beta = zeros(d);
    L.ff1_w = weight(d, ff, rng);
    L.ff1_b = zeros(ff);
    L.ff2_w = weight(ff, d, rng);
    L.ff2_b = zeros(d);
    L.ff_ln_gamma = ones(d);
    L.ff_ln_beta = zeros(d);
    p.layers.push_back(std::move(L));
  }
  if (with_mlm_head) p.mlm_bias = zeros(V);
  return p;
}

}  // namespace

ModelParams ModelParams::init_stl(const EncoderConfig& config, Task task, bool with_mlm_head,
                                  std::uint64_t seed) {
  ModelParams p = init_encoder(config, with_mlm_head, seed);
  p.environment = Environment::STL;
  p.stl_task = task;
  std::mt19937_64 rng(mix_seed(seed, 0x4EAD));
  p.heads.emplace_back(task, make_head(static_cast<std::size_t>(config.d_model), rng));
  return p;
}

ModelParams ModelParams::init_mtl(const EncoderConfig& config, bool with_mlm_head,
                                  std::uint64_t seed) {
  ModelParams p = init_encoder(config, with_mlm_head, seed);
  p.environment = Environment::MTL;
  std::mt19937_64 rng(mix_seed(seed, 0x4EAD));
  for (Task t : kAllTasks)
    p.heads.emplace_back(t, make_head(static_cast<std::size_t>(config.d_model), rng));
  return p;
}

std::vector<NamedTensor> ModelParams::encoder_parameters() const {
  std::vector<NamedTensor> out{{"embeddings.token", token_embedding},
                               {"embeddings.position", position_embedding},
                               {"embeddings.ln.gamma", embedding_ln_gamma},
                               {"embeddings.ln.beta", embedding_ln_beta}};
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& L = layers[l];
    const std::string pre = "layer" + std::to_string(l) + ".";
    out.insert(out.end(), {{pre + "attn.wq", L.wq},
                           {pre + "attn.bq", L.bq},
                           {pre + "attn.wk", L.wk},
                           {pre + "attn.bk", L.bk},
                           {pre + "attn.wv", L.wv},
                           {pre + "attn.bv", L.bv},
                           {pre + "attn.wo", L.wo},
                           {pre + "attn.bo", L.bo},
                           {pre + "attn.ln.gamma", L.attn_ln_gamma},
                           {pre + "attn.ln.beta", L.attn_ln_beta},
                           {pre + "ff1.w", L.ff1_w},
                           {pre + "ff1.b", L.ff1_b},
                           {pre + "ff2.w", L.ff2_w},
                           {pre + "ff2.b", L.ff2_b},
                           {pre + "ff.ln.gamma", L.ff_ln_gamma},
                           {pre + "ff.ln.beta", L.ff_ln_beta}});
  }
  return out;
}

std::vector<NamedTensor> ModelParams::head_parameters() const {
  std::vector<NamedTensor> out;
  for (const auto& [task, h] : heads) {
    const std::string pre = "head." + std::string(task_name(task)) + ".";
    out.push_back({pre + "weight", h.weight});
    out.push_back({pre + "bias", h.bias});
  }
  return out;
}

std::vector<NamedTensor> ModelParams::named_parameters() const {
  auto out = encoder_parameters();
  auto hp = head_parameters();
  out.insert(out.end(), hp.begin(), hp.end());
  if (mlm_bias) out.push_back({"mlm.bias", *mlm_bias});
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& nt : named_parameters()) n += nt.tensor.numel();
  return n;
}

std::size_t ModelParams::encoder_parameter_count() const {
  std::size_t n = 0;
  for (const auto& nt : encoder_parameters()) n += nt.tensor.numel();
  return n;
}

const ClassificationHead& ModelParams::head(Task task) const {
  for (const auto& [t, h] : heads)
    if (t == task) return h;
  throw EnvironmentError("model has no head for task " + std::string(task_name(task)));
}

void ModelParams::reinit_heads(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& [task, h] : heads) h = make_head(static_cast<std::size_t>(config.d_model), rng);
}

ModelParams ModelParams::clone() const {
  ModelParams c = *this;
  auto cp = [](Tensor& t) { t = t.clone(); };
  cp(c.token_embedding);
  cp(c.position_embedding);
  cp(c.embedding_ln_gamma);
  cp(c.embedding_ln_beta);
  for (auto& L : c.layers) {
    for (Tensor* t : {&L.wq, &L.bq, &L.wk, &L.bk, &L.wv, &L.bv, &L.wo, &L.bo, &L.attn_ln_gamma,
                      &L.attn_ln_beta, &L.ff1_w, &L.ff1_b, &L.ff2_w, &L.ff2_b, &L.ff_ln_gamma,
                      &L.ff_ln_beta})
      cp(*t);
  }
  for (auto& [task, h] : c.heads) {
    cp(h.weight);
    cp(h.bias);
  }
  if (c.mlm_bias) cp(*c.mlm_bias);
  return c;
}

void ModelParams::assign_from(const ModelParams& other) {
  auto mine = named_parameters();
  auto theirs = other.named_parameters();
  if (mine.size() != theirs.size()) throw EnvironmentError("assign_from: parameter sets differ");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].name != theirs[i].name ||
        mine[i].tensor.shape() != theirs[i].tensor.shape()) {
      throw EnvironmentError("assign_from: mismatch at " + mine[i].name);
    }
    auto dst = mine[i].tensor.mutable_data();
    auto src = theirs[i].tensor.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

void ModelParams::zero_grad() {
  for (auto& nt : named_parameters()) nt.tensor.zero_grad();
}

// ---- batching --------------------------------------------------------------

Batch collate(std::span<const EncodedInput* const> inputs, bool trim_padding) {
  if (inputs.empty()) throw DimensionError("collate: empty batch");
  const std::size_t L = inputs.front()->ids.size();
  std::size_t keep = 0;
  for (const auto* e : inputs) {
    if (e->ids.size() != L || e->attention_mask.size() != L) {
      throw DimensionError("collate: sequences of unequal length " + std::to_string(L) + " and " +
                           std::to_string(e->ids.size()));
    }
    for (std::size_t j = 0; j < L; ++j)
      if (e->attention_mask[j]) keep = std::max(keep, j + 1);
  }
  if (!trim_padding) keep = L;
  Batch b;
  b.size = inputs.size();
  b.seq_len = keep;
  b.ids.reserve(b.size * keep);
  b.mask.reserve(b.size * keep);
  for (const auto* e : inputs) {
    b.ids.insert(b.ids.end(), e->ids.begin(), e->ids.begin() + static_cast<std::ptrdiff_t>(keep));
    b.mask.insert(b.mask.end(), e->attention_mask.begin(),
                  e->attention_mask.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  return b;
}

Batch collate(std::span<const EncodedInput> inputs, bool trim_padding) {
  std::vector<const EncodedInput*> ptrs;
  for (const auto& e : inputs) ptrs.push_back(&e);
  return collate(ptrs, trim_padding);
}

// ---- forward passes --------------------------------------------------------

namespace {
thread_local std::uint64_t tl_encoder_calls = 0;

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_bias(matmul(x, w), b);
}
}  // namespace

std::uint64_t encoder_forward_count() { return tl_encoder_calls; }

Tensor encoder_forward(const ModelParams& p, const Batch& batch, bool train_mode,
                       std::uint64_t rng_seed, EncoderTrace* trace) {
  if (batch.size == 0) throw DimensionError("encoder_forward: empty batch");
  if (batch.seq_len > static_cast<std::size_t>(p.config.max_seq_len)) {
    throw DimensionError("encoder_forward: sequence length " + std::to_string(batch.seq_len) +
                         " exceeds max_seq_len " + std::to_string(p.config.max_seq_len));
  }
  ++tl_encoder_calls;
  const std::size_t B = batch.size, L = batch.seq_len;
  const auto d = static_cast<std::size_t>(p.config.d_model);
  const double drop = train_mode ? p.config.dropout : 0.0;
  std::uint64_t site = 0;
  auto dropout_site = [&](const Tensor& x) { return dropout(x, drop, mix_seed(rng_seed, site++)); };

  std::vector<int> positions(B * L);
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i % L);
  Tensor x = add(embedding_lookup(p.token_embedding, batch.ids),
                 gather_rows(p.position_embedding, positions));
  x = dropout_site(layer_norm(x, p.embedding_ln_gamma, p.embedding_ln_beta));

  if (trace) trace->attention.clear();
  for (const auto& layer : p.layers) {
    Tensor q = linear(x, layer.wq, layer.bq);
    Tensor k = linear(x, layer.wk, layer.bk);
    Tensor v = linear(x, layer.wv, layer.bv);
    std::vector<double>* probs = nullptr;
    if (trace) probs = &trace->attention.emplace_back();
    Tensor a = multi_head_attention(q, k, v, batch.mask, B, L,
                                    static_cast<std::size_t>(p.config.n_heads), probs);
    a = dropout_site(linear(a, layer.wo, layer.bo));
    x = layer_norm(add(x, a), layer.attn_ln_gamma, layer.attn_ln_beta);
    Tensor f = linear(gelu(linear(x, layer.ff1_w, layer.ff1_b)), layer.ff2_w, layer.ff2_b);
    x = layer_norm(add(x, dropout_site(f)), layer.ff_ln_gamma, layer.ff_ln_beta);
  }
  return reshape(x, {B, L, d});
}

Tensor encoder_forward(const ModelParams& p, std::span<const EncodedInput> batch,
                       bool train_mode, std::uint64_t rng_seed) {
  return encoder_forward(p, collate(batch), train_mode, rng_seed);
}

Tensor cls_hidden(const Tensor& hidden) {
  if (hidden.rank() != 3) throw DimensionError("cls_hidden: expected [batch, seq, d]");
  const std::size_t B = hidden.dim(0), L = hidden.dim(1), d = hidden.dim(2);
  std::vector<int> rows(B);
  for (std::size_t b = 0; b < B; ++b) rows[b] = static_cast<int>(b * L);
  return gather_rows(reshape(hidden, {B * L, d}), rows);
}

Tensor head_logits(const ClassificationHead& head, const Tensor& h_cls) {
  if (h_cls.rank() != 2 || h_cls.dim(1) != head.weight.dim(0)) {
    throw DimensionError("classify: hidden " + shape_str(h_cls.shape()) + " vs head weight " +
                         shape_str(head.weight.shape()));
  }
  return linear(h_cls, head.weight, head.bias);
}

Tensor classify(const ClassificationHead& head, const Tensor& h_cls) {
  return softmax_rows(head_logits(head, h_cls));
}

TaskOutput stl_forward(const ModelParams& p, const Batch& batch, bool train_mode,
                       std::uint64_t rng_seed) {
  if (p.environment != Environment::STL || !p.stl_task) {
    throw EnvironmentError("stl_forward requires single-task parameters");
  }
  Tensor h = cls_hidden(encoder_forward(p, batch, train_mode, rng_seed));
  Tensor logits = head_logits(p.head(*p.stl_task), h);
  return {logits, softmax_rows(logits)};
}

std::array<TaskOutput, 3> mtl_forward(const ModelParams& p, const Batch& batch, bool train_mode,
                                      std::uint64_t rng_seed) {
  if (p.environment != Environment::MTL) {
    throw EnvironmentError("mtl_forward requires multitask parameters");
  }
  Tensor h = cls_hidden(encoder_forward(p, batch, train_mode, rng_seed));
  std::array<TaskOutput, 3> out;
  for (Task t : kAllTasks) {
    Tensor logits = head_logits(p.head(t), h);
    out[task_index(t)] = {logits, softmax_rows(logits)};
  }
  return out;
}

Tensor mlm_forward(const ModelParams& p, const Batch& batch, bool train_mode,
                   std::uint64_t rng_seed) {
  if (!p.mlm_bias) throw EnvironmentError("mlm_forward: model has no MLM head");
  Tensor h = encoder_forward(p, batch, train_mode, rng_seed);
  const std::size_t B = h.dim(0), L = h.dim(1), d = h.dim(2);
  Tensor logits =
      add_bias(matmul(reshape(h, {B * L, d}), transpose(p.token_embedding)), *p.mlm_bias);
  return reshape(logits, {B, L, p.token_embedding.dim(0)});
}

// ---- checkpoints -----------------------------------------------------------

namespace {

json config_to_json(const EncoderConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len},
          {"dropout", c.dropout}};
}

EncoderConfig config_from_json(const json& j) {
  EncoderConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.dropout = j.at("dropout").get<double>();
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params,
                     const CheckpointInfo& info) {
  json j;
  j["format"] = "germtl-checkpoint";
  j["version"] = kCheckpointVersion;
  j["environment"] = environment_name(params.environment);
  j["task"] = params.stl_task ? json(task_name(*params.stl_task)) : json(nullptr);
  j["encoder"] = config_to_json(params.config);
  j["mlm_head"] = params.mlm_bias.has_value();
  j["vocab_hash"] = info.vocab_hash;
  j["config_hash"] = info.config_hash;
  json ps = json::array();
  for (const auto& [name, t] : params.named_parameters()) {
    ps.push_back({{"name", name},
                  {"shape", t.shape()},
                  {"data", std::vector<double>(t.data().begin(), t.data().end())}});
  }
  j["parameters"] = std::move(ps);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path.string());
  os << j.dump() << '\n';
}

std::pair<ModelParams, CheckpointInfo> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read checkpoint " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw DataError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }
  if (j.value("format", "") != "germtl-checkpoint") {
    throw DataError(path.string() + " is not a germtl checkpoint");
  }
  if (j.value("version", 0) != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(j.value("version", 0)));
  }
  try {
    const EncoderConfig cfg = config_from_json(j.at("encoder"));
    const Environment env = parse_environment(j.at("environment").get<std::string>());
    const bool mlm = j.at("mlm_head").get<bool>();
    ModelParams p = env == Environment::STL
                        ? ModelParams::init_stl(cfg, parse_task(j.at("task").get<std::string>()),
                                                mlm, 0)
                        : ModelParams::init_mtl(cfg, mlm, 0);
    auto named = p.named_parameters();
    const auto& stored = j.at("parameters");
    if (stored.size() != named.size()) {
      throw DataError("checkpoint holds " + std::to_string(stored.size()) +
                      " parameters, expected " + std::to_string(named.size()));
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
      const auto& s = stored[i];
      if (s.at("name").get<std::string>() != named[i].name ||
          s.at("shape").get<Shape>() != named[i].tensor.shape()) {
        throw DataError("checkpoint parameter " + std::to_string(i) + " ('" +
                        s.at("name").get<std::string>() + "') does not match '" + named[i].name +
                        "' " + shape_str(named[i].tensor.shape()));
      }
      auto values = s.at("data").get<std::vector<double>>();
      auto dst = named[i].tensor.mutable_data();
      if (values.size() != dst.size()) throw DataError("size mismatch in " + named[i].name);
      std::copy(values.begin(), values.end(), dst.begin());
    }
    CheckpointInfo info{j.at("vocab_hash").get<std::string>(),
                        j.at("config_hash").get<std::string>()};
    return {std::move(p), std::move(info)};
  } catch (const json::exception& e) {
    throw DataError("malformed checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace germtl
