#include "avedit/model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "avedit/random.hpp"

namespace avedit {

void ModelConfig::validate() const {
  if (blocks == 0) throw std::invalid_argument("ModelConfig: blocks must be >= 1");
  if (heads == 0 || hidden % heads != 0) {
    throw std::invalid_argument("ModelConfig: hidden " + std::to_string(hidden) + " not divisible by heads " +
                                std::to_string(heads));
  }
  rotary_split(head_dim());
  if (vocab < 2 || caption_length == 0 || mlp_ratio == 0) {
    throw std::invalid_argument("ModelConfig: vocab >= 2, caption_length >= 1 and mlp_ratio >= 1 required");
  }
  if (video_channels == 0 || audio_channels == 0) throw std::invalid_argument("ModelConfig: zero channel count");
  if (a2v_group_size < 0.0 || v2a_group_size < 0.0) throw std::invalid_argument("ModelConfig: negative group size");
  layout.validate();
}

SequenceLayout layout_for(const CodecConfig& codec) {
  SequenceLayout l;
  l.frames = codec.frames;
  l.audio_tokens = codec.audio_tokens();
  l.grid_h = codec.grid_h();
  l.grid_w = codec.grid_w();
  return l;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

void visit(const std::string& name, Linear& l, const std::function<void(const std::string&, Tensor&)>& fn) {
  fn(name + ".w", l.w);
  if (l.b.defined()) fn(name + ".b", l.b);
}

void visit(const std::string& name, AttentionParams& a, const std::function<void(const std::string&, Tensor&)>& fn) {
  visit(name + ".q", a.q, fn);
  visit(name + ".k", a.k, fn);
  visit(name + ".v", a.v, fn);
  visit(name + ".o", a.o, fn);
}

void visit(const std::string& name, Modulation& m, const std::function<void(const std::string&, Tensor&)>& fn) {
  visit(name + ".shift", m.shift, fn);
  visit(name + ".scale", m.scale, fn);
  visit(name + ".gate", m.gate, fn);
}

Linear make_linear(std::size_t in, std::size_t out, bool bias = true) {
  return {Tensor::zeros({in, out}, true), bias ? Tensor::zeros({out}, true) : Tensor()};
}

AttentionParams make_attention(std::size_t d, std::size_t kv_in) {
  return {make_linear(d, d), make_linear(kv_in, d, false), make_linear(kv_in, d), make_linear(d, d)};
}

// Context layers read raw latents without bias, so a zero source contributes nothing.
AttentionParams make_context_attention(std::size_t d, std::size_t kv_in) {
  return {make_linear(d, d), make_linear(kv_in, d, false), make_linear(kv_in, d, false), make_linear(d, d, false)};
}

Modulation make_modulation(std::size_t d) { return {make_linear(d, d), make_linear(d, d), make_linear(d, d)}; }

}  // namespace

void Model::for_each_parameter(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit("video.embed_target", embed_target, fn);
  visit("video.embed_condition", embed_condition, fn);
  visit("video.embed_reference", embed_reference, fn);
  fn("video.mask_embed", mask_embed);
  visit("audio.embed", embed_audio, fn);
  fn("text_table", text_table);
  visit("video.time.fc1", video_time.fc1, fn);
  visit("video.time.fc2", video_time.fc2, fn);
  visit("audio.time.fc1", audio_time.fc1, fn);
  visit("audio.time.fc2", audio_time.fc2, fn);
  for (std::size_t i = 0; i < video_blocks.size(); ++i) {
    const std::string p = "video.blocks." + std::to_string(i);
    auto& b = video_blocks[i];
    visit(p + ".self_attn", b.self_attn, fn);
    visit(p + ".text_attn", b.text_attn, fn);
    visit(p + ".a2v", b.a2v, fn);
    visit(p + ".mlp_in", b.mlp_in, fn);
    visit(p + ".mlp_out", b.mlp_out, fn);
    for (std::size_t s = 0; s < b.mod.size(); ++s) visit(p + ".mod." + std::to_string(s), b.mod[s], fn);
  }
  for (std::size_t i = 0; i < audio_blocks.size(); ++i) {
    const std::string p = "audio.blocks." + std::to_string(i);
    auto& b = audio_blocks[i];
    visit(p + ".self_attn", b.self_attn, fn);
    visit(p + ".text_attn", b.text_attn, fn);
    visit(p + ".v2a", b.v2a, fn);
    visit(p + ".visual_context", b.visual_context, fn);
    visit(p + ".acoustic_context", b.acoustic_context, fn);
    visit(p + ".mlp_in", b.mlp_in, fn);
    visit(p + ".mlp_out", b.mlp_out, fn);
    for (std::size_t s = 0; s < b.mod.size(); ++s) visit(p + ".mod." + std::to_string(s), b.mod[s], fn);
  }
  visit("video.head.shift", video_head.shift, fn);
  visit("video.head.scale", video_head.scale, fn);
  visit("video.head.proj", video_head.proj, fn);
  visit("audio.head.shift", audio_head.shift, fn);
  visit("audio.head.scale", audio_head.scale, fn);
  visit("audio.head.proj", audio_head.proj, fn);
}

std::vector<std::pair<std::string, Tensor>> Model::parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  for_each_parameter([&](const std::string& name, Tensor& t) { out.emplace_back(name, t); });
  return out;
}

std::size_t Model::parameter_count() {
  std::size_t n = 0;
  for_each_parameter([&](const std::string&, Tensor& t) { n += t.size(); });
  return n;
}

Model Model::clone() const {
  Model m = *this;
  m.for_each_parameter([](const std::string&, Tensor& t) { t = t.clone(); });
  return m;
}

std::shared_ptr<const PositionPlan> make_plan(const ModelConfig& config) {
  auto plan = std::make_shared<PositionPlan>();
  plan->table = assign_positions(config.layout, config.positions);
  const std::size_t hd = config.head_dim();
  plan->video = rotary_angles(plan->table.video(), hd, config.rope_base);
  plan->target = rotary_angles(plan->table.target(), hd, config.rope_base);
  plan->condition = rotary_angles(plan->table.condition(), hd, config.rope_base);
  plan->audio = rotary_angles(plan->table.audio(), hd, config.rope_base);
  plan->v2a = v2a_mask(plan->table, config.v2a_half_width());
  plan->acoustic = acoustic_window_mask(config.layout.audio_tokens, config.acoustic_window);
  return plan;
}

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.hidden;
  const std::size_t cv = config.video_channels, ca = config.audio_channels;
  Model m;
  m.config = config;
  m.seed = seed;
  m.embed_target = make_linear(cv, d);
  m.embed_condition = make_linear(cv, d);
  m.embed_reference = make_linear(cv, d);
  m.mask_embed = Tensor::zeros({1, d}, true);
  m.embed_audio = make_linear(ca, d);
  m.text_table = Tensor::zeros({config.vocab, d}, true);
  m.video_time = {make_linear(d, d), make_linear(d, d)};
  m.audio_time = {make_linear(d, d), make_linear(d, d)};
  for (std::size_t i = 0; i < config.blocks; ++i) {
    VideoBlock vb;
    vb.self_attn = make_attention(d, d);
    vb.text_attn = make_attention(d, d);
    vb.a2v = make_attention(d, d);
    vb.mlp_in = make_linear(d, d * config.mlp_ratio);
    vb.mlp_out = make_linear(d * config.mlp_ratio, d);
    for (auto& mod : vb.mod) mod = make_modulation(d);
    m.video_blocks.push_back(std::move(vb));

    AudioBlock ab;
    ab.self_attn = make_attention(d, d);
    ab.text_attn = make_attention(d, d);
    ab.v2a = make_attention(d, d);
    ab.visual_context = make_context_attention(d, cv);
    ab.acoustic_context = make_context_attention(d, ca);
    ab.mlp_in = make_linear(d, d * config.mlp_ratio);
    ab.mlp_out = make_linear(d * config.mlp_ratio, d);
    for (auto& mod : ab.mod) mod = make_modulation(d);
    m.audio_blocks.push_back(std::move(ab));
  }
  m.video_head = {make_linear(d, d), make_linear(d, d), make_linear(d, cv)};
  m.audio_head = {make_linear(d, d), make_linear(d, d), make_linear(d, ca)};

  Rng rng(seed);
  m.for_each_parameter([&](const std::string& name, Tensor& t) {
    const bool bias = name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0;
    if (bias) return;
    for (auto& v : t.mutable_data()) v = 0.02 * rng.normal();
  });
  for (auto& b : m.audio_blocks) {
    for (Linear* o : {&b.visual_context.o, &b.acoustic_context.o}) {
      for (auto& v : o->w.mutable_data()) v = 0.0;
    }
  }
  std::copy(m.embed_target.w.data().begin(), m.embed_target.w.data().end(), m.embed_condition.w.mutable_data().begin());
  std::copy(m.embed_target.b.data().begin(), m.embed_target.b.data().end(), m.embed_condition.b.mutable_data().begin());
  m.plan = make_plan(config);
  return m;
}

// ---------------------------------------------------------------------------
// Masks and small helpers

std::vector<std::size_t> masked_target_rows(const LatentMask& mask, const SequenceLayout& layout) {
  if (mask.frames != layout.frames || mask.height != layout.grid_h || mask.width != layout.grid_w) {
    throw ShapeError("latent mask [" + std::to_string(mask.frames) + ", " + std::to_string(mask.height) + ", " +
                     std::to_string(mask.width) + "] does not match layout");
  }
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < mask.flags.size(); ++i) {
    if (mask.flags[i]) rows.push_back(i);
  }
  return rows;
}

namespace {
constexpr double kWindowTol = 1e-9;
}

AttentionMask a2v_mask(const PositionTable& table, std::span<const std::size_t> target_rows, double half_width) {
  const auto target = table.target();
  const auto audio = table.audio();
  AttentionMask m{target_rows.size(), audio.size(), std::vector<std::uint8_t>(target_rows.size() * audio.size(), 0)};
  for (std::size_t r = 0; r < target_rows.size(); ++r) {
    const double p = target[target_rows[r]].temporal;
    for (std::size_t j = 0; j < audio.size(); ++j) {
      m.allowed[r * audio.size() + j] = std::abs(audio[j].temporal - p) <= half_width + kWindowTol;
    }
  }
  return m;
}

AttentionMask v2a_mask(const PositionTable& table, double half_width) {
  const auto target = table.target();
  const auto audio = table.audio();
  AttentionMask m{audio.size(), target.size(), std::vector<std::uint8_t>(audio.size() * target.size(), 0)};
  for (std::size_t j = 0; j < audio.size(); ++j) {
    for (std::size_t k = 0; k < target.size(); ++k) {
      m.allowed[j * target.size() + k] = std::abs(audio[j].temporal - target[k].temporal) <= half_width + kWindowTol;
    }
  }
  return m;
}

AttentionMask acoustic_window_mask(std::size_t tokens, std::size_t window) {
  AttentionMask m{tokens, tokens, std::vector<std::uint8_t>(tokens * tokens, 0)};
  const std::size_t half = window / 2;
  for (std::size_t j = 0; j < tokens; ++j) {
    for (std::size_t k = 0; k < tokens; ++k) {
      const std::size_t dist = j > k ? j - k : k - j;
      m.allowed[j * tokens + k] = dist <= half;
    }
  }
  return m;
}

Tensor timestep_embedding(std::span<const double> ts, std::size_t dim) {
  const std::size_t half = dim / 2;
  std::vector<double> out(ts.size() * dim, 0.0);
  for (std::size_t r = 0; r < ts.size(); ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double a = 1000.0 * ts[r] * freq;
      out[r * dim + i] = std::cos(a);
      out[r * dim + half + i] = std::sin(a);
    }
  }
  return Tensor::from({ts.size(), dim}, std::move(out));
}

std::vector<std::size_t> pad_caption(std::vector<std::size_t> tokens, std::size_t length) {
  if (tokens.size() > length) {
    throw std::invalid_argument("caption of " + std::to_string(tokens.size()) + " tokens exceeds length " +
                                std::to_string(length));
  }
  tokens.resize(length, kNullToken);
  return tokens;
}

namespace {

Tensor as_rows(const Tensor& t, std::size_t cols) {
  return Tensor::from({t.size() / cols, cols}, std::vector<double>(t.data().begin(), t.data().end()));
}

RotaryAngles subset_angles(std::span<const TokenPosition> all, std::span<const std::size_t> rows,
                           const ModelConfig& cfg) {
  std::vector<TokenPosition> picked;
  picked.reserve(rows.size());
  for (auto r : rows) picked.push_back(all[r]);
  return rotary_angles(picked, cfg.head_dim(), cfg.rope_base);
}

AttentionMask key_padding_mask(std::size_t queries, std::span<const std::size_t> ids) {
  AttentionMask m{queries, ids.size(), std::vector<std::uint8_t>(queries * ids.size())};
  for (std::size_t q = 0; q < queries; ++q) {
    for (std::size_t k = 0; k < ids.size(); ++k) m.allowed[q * ids.size() + k] = ids[k] != kNullToken;
  }
  return m;
}

// Queries [Nm, D] (already normalized) over audio keys.
Tensor a2v_rows(Graph& g, const Model& model, const AttentionParams& p, const Tensor& queries,
                std::span<const std::size_t> rows, const Tensor& audio) {
  const auto& cfg = model.config;
  const auto& plan = *model.plan;
  const AttentionMask mask = a2v_mask(plan.table, rows, cfg.a2v_half_width());
  Tensor q = g.rotary(g.linear(queries, p.q.w, p.q.b), subset_angles(plan.table.target(), rows, cfg));
  Tensor k = g.rotary(g.linear(audio, p.k.w, p.k.b), plan.audio);
  Tensor v = g.linear(audio, p.v.w, p.v.b);
  return g.linear(g.attention(q, k, v, cfg.heads, &mask), p.o.w, p.o.b);
}

}  // namespace

Tensor cross_modal_a2v(Graph& g, const Model& model, const AttentionParams& p, const Tensor& video_target,
                       const Tensor& audio, const LatentMask& mask) {
  const auto rows = masked_target_rows(mask, model.config.layout);
  if (video_target.rank() != 2 || video_target.dim(0) != model.config.layout.frame_tokens()) {
    throw ShapeError("cross_modal_a2v: video target tokens " + to_string(video_target.shape()));
  }
  const Tensor zeros = Tensor::zeros(video_target.shape());
  if (rows.empty()) return zeros;
  Tensor upd = a2v_rows(g, model, p, g.gather_rows(video_target, rows), rows, audio);
  return g.scatter_add_rows(zeros, rows, upd);
}

Tensor cross_modal_v2a(Graph& g, const Model& model, const AttentionParams& p, const Tensor& audio,
                       const Tensor& video_target) {
  const auto& cfg = model.config;
  const auto& plan = *model.plan;
  if (video_target.rank() != 2 || video_target.dim(0) != cfg.layout.frame_tokens()) {
    throw ShapeError("cross_modal_v2a: video target tokens " + to_string(video_target.shape()));
  }
  Tensor src = g.detach(video_target);
  Tensor q = g.rotary(g.linear(audio, p.q.w, p.q.b), plan.audio);
  Tensor k = g.rotary(g.linear(src, p.k.w, p.k.b), plan.target);
  Tensor v = g.linear(src, p.v.w, p.v.b);
  return g.linear(g.attention(q, k, v, cfg.heads, &plan.v2a), p.o.w, p.o.b);
}

Tensor visual_context_attn(Graph& g, const Model& model, const AttentionParams& p, const Tensor& audio,
                           const Tensor& masked_video) {
  const auto& cfg = model.config;
  const auto& plan = *model.plan;
  Tensor zc = masked_video.rank() == 2 ? masked_video : as_rows(masked_video, cfg.video_channels);
  if (zc.dim(0) != cfg.layout.frame_tokens() || zc.dim(1) != cfg.video_channels) {
    throw ShapeError("visual_context_attn: masked video " + to_string(masked_video.shape()));
  }
  Tensor q = g.rotary(g.linear(audio, p.q.w, p.q.b), plan.audio);
  Tensor k = g.rotary(g.linear(zc, p.k.w, p.k.b), plan.condition);
  Tensor v = g.linear(zc, p.v.w, p.v.b);
  return g.linear(g.attention(q, k, v, cfg.heads), p.o.w, p.o.b);
}

Tensor acoustic_context_attn(Graph& g, const Model& model, const AttentionParams& p, const Tensor& audio,
                             const Tensor& base_audio) {
  const auto& cfg = model.config;
  const auto& plan = *model.plan;
  if (base_audio.rank() != 2 || base_audio.dim(0) != cfg.layout.audio_tokens ||
      base_audio.dim(1) != cfg.audio_channels) {
    throw ShapeError("acoustic_context_attn: base audio " + to_string(base_audio.shape()) + " must be [" +
                     std::to_string(cfg.layout.audio_tokens) + ", " + std::to_string(cfg.audio_channels) + "]");
  }
  Tensor q = g.rotary(g.linear(audio, p.q.w, p.q.b), plan.audio);
  Tensor k = g.rotary(g.linear(base_audio, p.k.w, p.k.b), plan.audio);
  Tensor v = g.linear(base_audio, p.v.w, p.v.b);
  return g.linear(g.attention(q, k, v, cfg.heads, &plan.acoustic), p.o.w, p.o.b);
}

// ---------------------------------------------------------------------------
// Forward

namespace {

struct StreamContext {
  Tensor cond_act;                  // silu(c) rows, one per distinct timestep
  std::vector<std::size_t> row_of;  // token -> conditioning row
};

Tensor time_conditioning(Graph& g, const TimeEmbedder& te, std::span<const double> ts, std::size_t d) {
  Tensor emb = timestep_embedding(ts, d);
  Tensor c = g.linear(g.silu(g.linear(emb, te.fc1.w, te.fc1.b)), te.fc2.w, te.fc2.b);
  return g.silu(c);
}

struct Modulated {
  Tensor shift, scale, gate;
};

Modulated modulation_rows(Graph& g, const Modulation& m, const StreamContext& ctx) {
  return {g.gather_rows(g.linear(ctx.cond_act, m.shift.w, m.shift.b), ctx.row_of),
          g.gather_rows(g.linear(ctx.cond_act, m.scale.w, m.scale.b), ctx.row_of),
          g.gather_rows(g.linear(ctx.cond_act, m.gate.w, m.gate.b), ctx.row_of)};
}

Tensor modulate(Graph& g, const Tensor& x, const Tensor& shift, const Tensor& scale) {
  Tensor h = g.layer_norm(x);
  return g.add(g.add(h, g.mul(h, scale)), shift);
}

Tensor gated(Graph& g, const Tensor& f, const Tensor& gate) { return g.add(f, g.mul(f, gate)); }

Tensor self_attention(Graph& g, const AttentionParams& p, const Tensor& h, const RotaryAngles& angles,
                      std::size_t heads, const AttentionMask* mask) {
  Tensor q = g.rotary(g.linear(h, p.q.w, p.q.b), angles);
  Tensor k = g.rotary(g.linear(h, p.k.w, p.k.b), angles);
  Tensor v = g.linear(h, p.v.w, p.v.b);
  return g.linear(g.attention(q, k, v, heads, mask), p.o.w, p.o.b);
}

Tensor text_attention(Graph& g, const AttentionParams& p, const Tensor& h, const Tensor& text, std::size_t heads,
                      const AttentionMask& mask) {
  Tensor q = g.linear(h, p.q.w, p.q.b);
  Tensor k = g.linear(text, p.k.w, p.k.b);
  Tensor v = g.linear(text, p.v.w, p.v.b);
  return g.linear(g.attention(q, k, v, heads, &mask), p.o.w, p.o.b);
}

Tensor mlp(Graph& g, const Linear& in, const Linear& out, const Tensor& h) {
  return g.linear(g.gelu(g.linear(h, in.w, in.b)), out.w, out.b);
}

Tensor head(Graph& g, const OutputHead& hd, const Tensor& x, const StreamContext& ctx) {
  Tensor shift = g.gather_rows(g.linear(ctx.cond_act, hd.shift.w, hd.shift.b), ctx.row_of);
  Tensor scale = g.gather_rows(g.linear(ctx.cond_act, hd.scale.w, hd.scale.b), ctx.row_of);
  return g.linear(modulate(g, x, shift, scale), hd.proj.w, hd.proj.b);
}

void check_inputs(const ModelConfig& cfg, const StreamState& s, const ConditionBundle& c) {
  const auto& l = cfg.layout;
  const Shape video{l.frames, l.grid_h, l.grid_w, cfg.video_channels};
  const Shape audio{l.audio_tokens, cfg.audio_channels};
  const Shape ref{1, l.grid_h, l.grid_w, cfg.video_channels};
  auto expect = [](const char* what, const Tensor& t, const Shape& s) {
    if (!t.defined() || t.shape() != s) {
      throw ShapeError(std::string("forward: ") + what + " has shape " + (t.defined() ? to_string(t.shape()) : "<none>") +
                       ", expected " + to_string(s));
    }
  };
  expect("video state", s.video, video);
  expect("audio state", s.audio, audio);
  expect("reference", c.reference, ref);
  expect("masked video", c.masked_video, video);
  if (c.base_audio) expect("base audio", *c.base_audio, audio);
  if (s.t_video < 0.0 || s.t_video > 1.0 || s.t_audio < 0.0 || s.t_audio > 1.0) {
    throw std::invalid_argument("forward: timesteps must lie in [0, 1]");
  }
  for (const auto* cap : {&c.visual_caption, &c.audio_caption, &c.speech_caption}) {
    if (cap->size() != cfg.caption_length) {
      throw ShapeError("forward: caption length " + std::to_string(cap->size()) + " != " +
                       std::to_string(cfg.caption_length));
    }
    for (auto id : *cap) {
      if (id >= cfg.vocab) throw std::out_of_range("forward: caption token " + std::to_string(id) + " outside vocabulary");
    }
  }
}

}  // namespace

Prediction forward(Graph& g, const Model& model, const StreamState& state, const ConditionBundle& cond,
                   ForwardFlags flags) {
  const ModelConfig& cfg = model.config;
  const SequenceLayout& lay = cfg.layout;
  const PositionPlan& plan = *model.plan;
  const std::size_t d = cfg.hidden;
  check_inputs(cfg, state, cond);

  const std::size_t n_ref = lay.reference_tokens(), n_frame = lay.frame_tokens(), n_video = lay.video_tokens();
  const std::size_t tgt_off = lay.target_offset();
  const auto rows = masked_target_rows(cond.mask, lay);
  std::vector<std::size_t> global_rows(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) global_rows[i] = tgt_off + rows[i];

  // Token embeddings.
  Tensor ref_tok = g.linear(as_rows(cond.reference, cfg.video_channels), model.embed_reference.w, model.embed_reference.b);
  Tensor cond_raw = as_rows(cond.masked_video, cfg.video_channels);
  Tensor cond_tok = g.linear(cond_raw, model.embed_condition.w, model.embed_condition.b);
  Tensor tgt_tok = g.linear(as_rows(state.video, cfg.video_channels), model.embed_target.w, model.embed_target.b);
  if (!rows.empty()) {
    const std::vector<std::size_t> zeros(rows.size(), 0);
    Tensor me = g.embedding(model.mask_embed, zeros);
    cond_tok = g.scatter_add_rows(cond_tok, rows, me);
    tgt_tok = g.scatter_add_rows(tgt_tok, rows, me);
  }
  Tensor hv = g.concat_rows({ref_tok, cond_tok, tgt_tok});
  Tensor ha = g.linear(state.audio, model.embed_audio.w, model.embed_audio.b);

  // Timestep conditioning: reference and condition tokens run at t = 0.
  StreamContext vctx, vtgt, actx;
  const double vts[2] = {0.0, state.t_video};
  vctx.cond_act = time_conditioning(g, model.video_time, vts, d);
  vctx.row_of.assign(n_video, 0);
  for (std::size_t i = tgt_off; i < n_video; ++i) vctx.row_of[i] = 1;
  vtgt.cond_act = vctx.cond_act;
  vtgt.row_of.assign(n_frame, 1);
  StreamContext vmasked{vctx.cond_act, std::vector<std::size_t>(rows.size(), 1)};
  const double ats[1] = {state.t_audio};
  actx.cond_act = time_conditioning(g, model.audio_time, ats, d);
  actx.row_of.assign(lay.audio_tokens, 0);

  // Text conditioning.
  Tensor visual_text = g.embedding(model.text_table, cond.visual_caption);
  std::vector<std::size_t> audio_ids = cond.audio_caption;
  audio_ids.insert(audio_ids.end(), cond.speech_caption.begin(), cond.speech_caption.end());
  Tensor audio_text = g.embedding(model.text_table, audio_ids);
  const AttentionMask video_text_mask = key_padding_mask(n_video, cond.visual_caption);
  const AttentionMask audio_text_mask = key_padding_mask(lay.audio_tokens, audio_ids);

  // Background and reference tokens never read masked target tokens, so audio
  // injected by a2v stays inside M across blocks.
  std::optional<AttentionMask> video_self_mask;
  if (!rows.empty()) {
    std::vector<std::uint8_t> is_masked(n_video, 0);
    for (auto r : global_rows) is_masked[r] = 1;
    AttentionMask m = AttentionMask::all(n_video, n_video);
    for (std::size_t q = 0; q < n_video; ++q) {
      if (is_masked[q]) continue;
      for (auto k : global_rows) m.allowed[q * n_video + k] = 0;
    }
    video_self_mask = std::move(m);
  }

  const bool use_context = !flags.skip_context;
  const bool use_base = use_context && cond.base_audio.has_value();

  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const VideoBlock& vb = model.video_blocks[b];
    const AudioBlock& ab = model.audio_blocks[b];
    const Tensor hv_in = hv;
    const Tensor ha_in = ha;

    // Video stream.
    {
      auto m = modulation_rows(g, vb.mod[VideoBlock::kSelf], vctx);
      Tensor f = self_attention(g, vb.self_attn, modulate(g, hv, m.shift, m.scale), plan.video, cfg.heads,
                                video_self_mask ? &*video_self_mask : nullptr);
      hv = g.add(hv, gated(g, f, m.gate));
    }
    {
      auto m = modulation_rows(g, vb.mod[VideoBlock::kText], vctx);
      Tensor f = text_attention(g, vb.text_attn, modulate(g, hv, m.shift, m.scale), visual_text, cfg.heads,
                                video_text_mask);
      hv = g.add(hv, gated(g, f, m.gate));
    }
    if (!rows.empty()) {
      auto m = modulation_rows(g, vb.mod[VideoBlock::kA2V], vmasked);
      Tensor q = modulate(g, g.gather_rows(hv, global_rows), m.shift, m.scale);
      Tensor f = a2v_rows(g, model, vb.a2v, q, rows, g.layer_norm(ha_in));
      hv = g.scatter_add_rows(hv, global_rows, gated(g, f, m.gate));
    }
    {
      auto m = modulation_rows(g, vb.mod[VideoBlock::kMlp], vctx);
      Tensor f = mlp(g, vb.mlp_in, vb.mlp_out, modulate(g, hv, m.shift, m.scale));
      hv = g.add(hv, gated(g, f, m.gate));
    }

    // Audio stream.
    {
      auto m = modulation_rows(g, ab.mod[AudioBlock::kSelf], actx);
      Tensor f = self_attention(g, ab.self_attn, modulate(g, ha, m.shift, m.scale), plan.audio, cfg.heads, nullptr);
      ha = g.add(ha, gated(g, f, m.gate));
    }
    {
      auto m = modulation_rows(g, ab.mod[AudioBlock::kText], actx);
      Tensor f = text_attention(g, ab.text_attn, modulate(g, ha, m.shift, m.scale), audio_text, cfg.heads,
                                audio_text_mask);
      ha = g.add(ha, gated(g, f, m.gate));
    }
    {
      auto m = modulation_rows(g, ab.mod[AudioBlock::kV2A], actx);
      Tensor video_kv = g.layer_norm(g.slice_rows(hv_in, tgt_off, n_frame));
      Tensor f = cross_modal_v2a(g, model, ab.v2a, modulate(g, ha, m.shift, m.scale), video_kv);
      ha = g.add(ha, gated(g, f, m.gate));
    }
    if (use_context) {
      auto m = modulation_rows(g, ab.mod[AudioBlock::kVisualContext], actx);
      Tensor f = visual_context_attn(g, model, ab.visual_context, modulate(g, ha, m.shift, m.scale), cond_raw);
      ha = g.add(ha, gated(g, f, m.gate));
    }
    if (use_base) {
      auto m = modulation_rows(g, ab.mod[AudioBlock::kAcousticContext], actx);
      Tensor f = acoustic_context_attn(g, model, ab.acoustic_context, modulate(g, ha, m.shift, m.scale),
                                       *cond.base_audio);
      ha = g.add(ha, gated(g, f, m.gate));
    }
    {
      auto m = modulation_rows(g, ab.mod[AudioBlock::kMlp], actx);
      Tensor f = mlp(g, ab.mlp_in, ab.mlp_out, modulate(g, ha, m.shift, m.scale));
      ha = g.add(ha, gated(g, f, m.gate));
    }
  }
  (void)n_ref;

  Tensor video_out = head(g, model.video_head, g.slice_rows(hv, tgt_off, n_frame), vtgt);
  Tensor audio_out = head(g, model.audio_head, ha, actx);
  return {g.reshape(video_out, state.video.shape()), audio_out};
}

Prediction predict(const Model& model, const StreamState& state, const ConditionBundle& cond, ForwardFlags flags) {
  Graph g(Graph::Mode::kInference);
  return forward(g, model, state, cond, flags);
}

}  // namespace avedit
