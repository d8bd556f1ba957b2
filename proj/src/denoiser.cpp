#include "qup/denoiser.hpp"

#include "qup/common.hpp"

namespace qup::denoiser {

void DenoiserConfig::validate() const {
  if (channels.empty()) throw ValidationError("denoiser config: channels must be non-empty");
  for (int c : channels) {
    if (c <= 0) throw ValidationError("denoiser config: channel widths must be positive");
  }
  if (res_blocks_per_level < 1) throw ValidationError("denoiser config: need >= 1 block per level");
  if (references < 1) throw ValidationError("denoiser config: references must be positive");
  if (token_dim < 1) throw ValidationError("denoiser config: token_dim must be positive");
  if (time_dim < 2 || time_dim % 2 != 0) {
    throw ValidationError("denoiser config: time_dim must be even and >= 2");
  }
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"channels", channels},
          {"res_blocks_per_level", res_blocks_per_level},
          {"references", references},
          {"token_dim", token_dim},
          {"time_dim", time_dim}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.channels = j.at("channels").get<std::vector<int>>();
  c.res_blocks_per_level = j.value("res_blocks_per_level", 1);
  c.references = j.at("references").get<int>();
  c.token_dim = j.value("token_dim", 16);
  c.time_dim = j.value("time_dim", 32);
  c.validate();
  return c;
}

DenoiserConfig DenoiserConfig::small(int references) {
  return {{16, 16, 32}, 1, references, 16, 32};
}
DenoiserConfig DenoiserConfig::desk(int references) {
  return {{32, 32, 64}, 1, references, 16, 32};
}
DenoiserConfig DenoiserConfig::paper(int references) {
  return {{128, 128, 256}, 1, references, 32, 128};
}
DenoiserConfig DenoiserConfig::preset(const std::string& name, int references) {
  if (name == "small") return small(references);
  if (name == "desk") return desk(references);
  if (name == "paper") return paper(references);
  throw ValidationError("unknown denoiser preset '" + name + "'");
}

// ---- AttentionBlock -------------------------------------------------------

template <typename T>
AttentionBlock<T>::AttentionBlock(const std::string& name, int in, int out, int time_dim,
                                  int token_dim)
    : in_(in),
      out_(out),
      time_proj_(name + ".time", time_dim, in),
      conv1_(name + ".ff1", in, out, 3, 1, 1),
      conv2_(name + ".ff2", out, out, 3, 1, 1),
      attn_(name + ".attn", out, token_dim, token_dim) {
  if (in != out) skip_ = std::make_unique<nn::Conv2d<T>>(name + ".skip", in, out, 1, 1, 0);
}

template <typename T>
void AttentionBlock<T>::init(std::mt19937_64& rng) {
  time_proj_.init(rng);
  conv1_.init(rng);
  conv2_.init(rng);
  if (skip_) skip_->init(rng);
  attn_.init(rng);
}

template <typename T>
std::vector<nn::Param<T>*> AttentionBlock<T>::params() {
  std::vector<nn::Param<T>*> out;
  for (auto* p : time_proj_.params()) out.push_back(p);
  for (auto* p : conv1_.params()) out.push_back(p);
  for (auto* p : conv2_.params()) out.push_back(p);
  if (skip_) {
    for (auto* p : skip_->params()) out.push_back(p);
  }
  for (auto* p : attn_.params()) out.push_back(p);
  return out;
}

template <typename T>
nn::Tensor<T> AttentionBlock<T>::forward(const nn::Tensor<T>& x, const nn::Tensor<T>& temb,
                                         const nn::Tensor<T>& tokens) {
  const nn::Tensor<T> h = nn::add_channel_bias(x, time_proj_.forward(temb));
  nn::Tensor<T> h1 = conv2_.forward(act2_.forward(conv1_.forward(act1_.forward(h))));
  h1 += skip_ ? skip_->forward(h) : h;
  nn::Tensor<T> h2 = attn_.forward(h1, tokens);
  h2 += h1;
  return h2;
}

template <typename T>
nn::Tensor<T> AttentionBlock<T>::backward(const nn::Tensor<T>& dy, nn::Tensor<T>& dtemb,
                                          nn::Tensor<T>& dtokens) {
  nn::Tensor<T> dh1 = attn_.backward(dy, dtokens);
  dh1 += dy;
  nn::Tensor<T> dh = act1_.backward(conv1_.backward(act2_.backward(conv2_.backward(dh1))));
  dh += skip_ ? skip_->backward(dh1) : dh1;
  dtemb += time_proj_.backward(nn::channel_bias_grad(dh));
  return dh;
}

// ---- CrossAttentionUNet ---------------------------------------------------

template <typename T>
CrossAttentionUNet<T>::CrossAttentionUNet(const DenoiserConfig& config, std::uint64_t seed)
    : config_(config),
      token_embed_("tokens", 3, config.token_dim),
      time_mlp_("time_mlp", config.time_dim, config.time_dim),
      conv_in_("conv_in", config.in_channels(), config.channels.front(), 3, 1, 1),
      conv_out_("conv_out", config.channels.front(), 1, 3, 1, 1) {
  config_.validate();
  const auto& ch = config_.channels;
  const int levels = config_.levels();
  enc_.resize(levels);
  dec_.resize(levels);
  for (int l = 0; l < levels; ++l) {
    for (int b = 0; b < config_.res_blocks_per_level; ++b) {
      enc_[l].push_back(std::make_unique<AttentionBlock<T>>(
          "enc" + std::to_string(l) + "." + std::to_string(b), ch[l], ch[l], config_.time_dim,
          config_.token_dim));
    }
    if (l + 1 < levels) {
      down_.emplace_back("down" + std::to_string(l), ch[l], ch[l + 1], 3, 2, 1);
      up_.emplace_back("up" + std::to_string(l), ch[l + 1], ch[l], 3, 1, 1);
      for (int b = 0; b < config_.res_blocks_per_level; ++b) {
        dec_[l].push_back(std::make_unique<AttentionBlock<T>>(
            "dec" + std::to_string(l) + "." + std::to_string(b), b == 0 ? 2 * ch[l] : ch[l], ch[l],
            config_.time_dim, config_.token_dim));
      }
    }
  }
  std::mt19937_64 rng(seed);
  token_embed_.init(rng);
  time_mlp_.init(rng);
  conv_in_.init(rng);
  for (int l = 0; l < levels; ++l) {
    for (auto& b : enc_[l]) b->init(rng);
    for (auto& b : dec_[l]) b->init(rng);
  }
  for (auto& c : down_) c.init(rng);
  for (auto& c : up_) c.init(rng);
  conv_out_.init(rng);
}

template <typename T>
std::vector<nn::Param<T>*> CrossAttentionUNet<T>::params() {
  std::vector<nn::Param<T>*> out;
  auto add = [&](std::vector<nn::Param<T>*> ps) { out.insert(out.end(), ps.begin(), ps.end()); };
  add(token_embed_.params());
  add(time_mlp_.params());
  add(conv_in_.params());
  for (int l = 0; l < config_.levels(); ++l) {
    for (auto& b : enc_[l]) add(b->params());
    if (l + 1 < config_.levels()) {
      add(down_[l].params());
      add(up_[l].params());
    }
    for (auto& b : dec_[l]) add(b->params());
  }
  add(conv_out_.params());
  return out;
}

template <typename T>
void CrossAttentionUNet<T>::zero_grad() {
  for (auto* p : params()) p->zero_grad();
}

template <typename T>
std::size_t CrossAttentionUNet<T>::parameter_count() {
  std::size_t n = 0;
  for (auto* p : params()) n += p->size();
  return n;
}

template <typename T>
std::vector<nn::CrossAttention<T>*> CrossAttentionUNet<T>::attention_layers() {
  std::vector<nn::CrossAttention<T>*> out;
  for (int l = 0; l < config_.levels(); ++l) {
    for (auto& b : enc_[l]) out.push_back(&b->attention());
  }
  for (int l = config_.levels() - 1; l >= 0; --l) {
    for (auto& b : dec_[l]) out.push_back(&b->attention());
  }
  return out;
}

template <typename T>
nn::Tensor<T> CrossAttentionUNet<T>::forward(const nn::Tensor<T>& x, const std::vector<int>& steps,
                                             const nn::Tensor<T>& bmatrix) {
  if (x.c != config_.in_channels()) {
    throw ValidationError("denoiser: expected " + std::to_string(config_.in_channels()) +
                          " input channels, got " + std::to_string(x.c));
  }
  if (bmatrix.n != x.n || bmatrix.c != 3 || bmatrix.h != 1) {
    throw ValidationError("denoiser: bmatrix must be (n, 3, 1, R+1)");
  }
  if (bmatrix.w != config_.references + 1) {
    throw ValidationError("denoiser: bmatrix has " + std::to_string(bmatrix.w) +
                          " rows, expected R+1 = " + std::to_string(config_.references + 1));
  }
  if (static_cast<int>(steps.size()) != x.n) {
    throw ValidationError("denoiser: one step index per sample required");
  }
  in_h_ = x.h;
  in_w_ = x.w;
  const int m = config_.size_multiple();
  const int ph = (x.h + m - 1) / m * m;
  const int pw = (x.w + m - 1) / m * m;

  tokens_ = token_embed_.forward(bmatrix);
  temb_ = time_act_.forward(time_mlp_.forward(nn::timestep_embedding<T>(steps, config_.time_dim)));

  nn::Tensor<T> h = conv_in_.forward(nn::pad_to(x, ph, pw));
  const int levels = config_.levels();
  std::vector<nn::Tensor<T>> skips;
  for (int l = 0; l < levels; ++l) {
    for (auto& b : enc_[l]) h = b->forward(h, temb_, tokens_);
    if (l + 1 < levels) {
      skips.push_back(h);
      h = down_[l].forward(h);
    }
  }
  for (int l = levels - 2; l >= 0; --l) {
    h = up_[l].forward(nn::upsample2x(h));
    h = nn::concat_channels(h, skips[l]);
    for (auto& b : dec_[l]) h = b->forward(h, temb_, tokens_);
  }
  return nn::crop_to(conv_out_.forward(out_act_.forward(h)), in_h_, in_w_);
}

template <typename T>
nn::Tensor<T> CrossAttentionUNet<T>::backward(const nn::Tensor<T>& dy) {
  const int levels = config_.levels();
  const int m = config_.size_multiple();
  const int ph = (in_h_ + m - 1) / m * m;
  const int pw = (in_w_ + m - 1) / m * m;
  nn::Tensor<T> dtemb(temb_.n, temb_.c, 1, 1);
  nn::Tensor<T> dtokens(tokens_.n, tokens_.c, 1, tokens_.w);

  nn::Tensor<T> dh = out_act_.backward(conv_out_.backward(nn::pad_to(dy, ph, pw)));
  std::vector<nn::Tensor<T>> dskips(static_cast<std::size_t>(std::max(0, levels - 1)));
  for (int l = 0; l <= levels - 2; ++l) {
    for (auto it = dec_[l].rbegin(); it != dec_[l].rend(); ++it) {
      dh = (*it)->backward(dh, dtemb, dtokens);
    }
    nn::Tensor<T> dup, dskip;
    nn::split_channels(dh, config_.channels[l], dup, dskip);
    dskips[l] = std::move(dskip);
    dh = nn::upsample2x_backward(up_[l].backward(dup));
  }
  for (int l = levels - 1; l >= 0; --l) {
    if (l + 1 < levels) {
      dh = down_[l].backward(dh);
      dh += dskips[l];
    }
    for (auto it = enc_[l].rbegin(); it != enc_[l].rend(); ++it) {
      dh = (*it)->backward(dh, dtemb, dtokens);
    }
  }
  nn::Tensor<T> dx = nn::crop_to(conv_in_.backward(dh), in_h_, in_w_);
  time_mlp_.backward(time_act_.backward(dtemb));
  dbmatrix_ = token_embed_.backward(dtokens);
  return dx;
}

template class AttentionBlock<float>;
template class AttentionBlock<double>;
template class CrossAttentionUNet<float>;
template class CrossAttentionUNet<double>;

}  // namespace qup::denoiser
