#include "piqt/netcore.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <random>

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

namespace piqt {

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

const Block &Layout::at(std::string_view name) const {
  for (const Block &b : blocks) {
    if (b.name == name) return b;
  }
  throw ConfigError("unknown parameter block: " + std::string(name));
}

bool Layout::has(std::string_view name) const {
  for (const Block &b : blocks) {
    if (b.name == name) return true;
  }
  return false;
}

void Layout::add(std::string name, Eigen::Index rows, Eigen::Index cols) {
  if (rows < 1 || cols < 1) throw ConfigError("block " + name + " has empty shape");
  if (has(name)) throw ConfigError("duplicate parameter block: " + name);
  blocks.push_back({std::move(name), total, rows, cols});
  total += rows * cols;
}

// ---------------------------------------------------------------------------
// Lagged parameters
// ---------------------------------------------------------------------------

LaggedParams make_lagged(const ParameterSet &theta, double tau, std::int64_t period) {
  LaggedParams lagged;
  lagged.theta1 = theta.values;
  lagged.theta2 = theta.values;
  lagged.tau = tau;
  lagged.period = period;
  lagged.source_version = theta.version;
  return lagged;
}

void lag_update(const ParameterSet &theta, LaggedParams &lagged, std::int64_t step) {
  lagged.theta1 = (1.0 - lagged.tau) * lagged.theta1 + lagged.tau * theta.values;
  if (lagged.period > 0 && step % lagged.period == 0) lagged.theta2 = theta.values;
  lagged.source_version = theta.version;
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

namespace {

void check(bool ok, const char *msg) {
  if (!ok) throw ConfigError(msg);
}

}  // namespace

Network::Network(NetworkConfig cfg) : cfg_(std::move(cfg)) {
  check(cfg_.grid_side >= 1, "grid_side must be >= 1");
  check(cfg_.obs_channels >= 1, "obs_channels must be >= 1");
  check(cfg_.embed_dim >= 1, "embed_dim must be >= 1");
  check(cfg_.z_dim >= 1, "z_dim must be >= 1");
  for (int h : cfg_.q_hidden) check(h >= 1, "q_hidden widths must be >= 1");
  for (int h : cfg_.pi_hidden) check(h >= 1, "pi_hidden widths must be >= 1");
  if (cfg_.context == ContextKind::Embedding) {
    check(cfg_.task_embed_dim >= 1, "task_embed_dim must be >= 1");
    check(cfg_.task_count >= 1, "task_count must be >= 1");
  }

  auto layout = std::make_shared<Layout>();
  const int de = cfg_.embed_dim;
  if (cfg_.encoder == EncoderMode::Flat) {
    layout->add("enc.w", de, cfg_.vis_dim());
    layout->add("enc.b", de, 1);
  } else {
    conv1_ = nn::ConvShape{cfg_.grid_side, cfg_.vis_channels(), cfg_.conv_channels1};
    conv2_ = nn::ConvShape{conv1_.out_side(), cfg_.conv_channels1, cfg_.conv_channels2};
    check(conv2_.out_side() >= 1, "grid too small for conv encoder");
    layout->add("enc.conv1.w", conv1_.out_ch, conv1_.patch_dim());
    layout->add("enc.conv1.b", conv1_.out_ch, 1);
    layout->add("enc.conv2.w", conv2_.out_ch, conv2_.patch_dim());
    layout->add("enc.conv2.b", conv2_.out_ch, 1);
    layout->add("enc.proj.w", de, conv2_.out_dim());
    layout->add("enc.proj.b", de, 1);
  }
  layout->add("cond.w", de, cfg_.cond_dim());
  layout->add("cond.b", de, 1);
  if (cfg_.context == ContextKind::Embedding) {
    layout->add("ctx.table", cfg_.task_embed_dim, cfg_.task_count);
  }

  auto add_mlp = [&layout](const std::string &prefix, int in, const std::vector<int> &hidden, int out) {
    int prev = in;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      layout->add(prefix + ".w" + std::to_string(i), hidden[i], prev);
      layout->add(prefix + ".b" + std::to_string(i), hidden[i], 1);
      prev = hidden[i];
    }
    layout->add(prefix + ".wo", out, prev);
    layout->add(prefix + ".bo", out, 1);
  };
  add_mlp("q", de, cfg_.q_hidden, 1);
  if (cfg_.pi_heads) {
    add_mlp("fwd", de, cfg_.pi_hidden, cfg_.z_dim);
    add_mlp("bwd", de + 1, cfg_.pi_hidden, cfg_.z_dim);
  }
  layout_ = std::move(layout);
}

ParameterSet Network::init_params(std::uint64_t seed) const {
  ParameterSet p;
  p.layout = layout_;
  p.values = Eigen::VectorXd::Zero(layout_->total);
  p.version = 0;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (const Block &b : layout_->blocks) {
    const auto dot = b.name.rfind('.');
    const std::string leaf = dot == std::string::npos ? b.name : b.name.substr(dot + 1);
    double bound;
    if (b.name == "ctx.table") {
      bound = 1.0 / std::sqrt(static_cast<double>(b.rows));
    } else if (!leaf.empty() && leaf[0] == 'b') {
      // biases share their layer's fan-in bound (zero biases would let a dead
      // ReLU layer park a mu head exactly on the normalize singularity)
      const std::string sibling =
          b.name.substr(0, b.name.size() - leaf.size()) + 'w' + leaf.substr(1);
      bound = 1.0 / std::sqrt(static_cast<double>(layout_->at(sibling).cols));
    } else {
      bound = 1.0 / std::sqrt(static_cast<double>(b.cols));
    }
    auto w = view(p.values, b);
    for (Eigen::Index j = 0; j < b.cols; ++j)
      for (Eigen::Index i = 0; i < b.rows; ++i) w(i, j) = bound * unit(rng);
  }
  return p;
}

void Network::fill_vis_column(const Observation &obs, const TaskContext &ctx,
                              Eigen::Ref<Eigen::VectorXd> out) const {
  const Eigen::Index plane = static_cast<Eigen::Index>(cfg_.grid_side) * cfg_.grid_side;
  check(obs.visual.side == cfg_.grid_side && obs.visual.channels == cfg_.obs_channels,
        "observation shape does not match network config");
  check(out.size() == cfg_.vis_dim(), "visual column has wrong size");
  if (cfg_.context == ContextKind::ImageMask) {
    check(ctx.kind == ContextKind::ImageMask, "network expects image-mask contexts");
    check(ctx.first_frame.side == cfg_.grid_side && ctx.first_frame.channels == cfg_.obs_channels,
          "context frame shape does not match network config");
    check(ctx.overlay.side == cfg_.grid_side && ctx.overlay.channels == 1,
          "context overlay shape does not match network config");
    out.segment(0, plane * cfg_.obs_channels) = obs.visual.data;
    out.segment(plane * cfg_.obs_channels, plane * cfg_.obs_channels) = ctx.first_frame.data;
    out.segment(plane * cfg_.obs_channels * 2, plane) = ctx.overlay.data;
  } else {
    check(ctx.kind == ContextKind::Embedding, "network expects embedding contexts");
    out = obs.visual.data;
  }
}

Eigen::MatrixXd Network::visual_features(const Eigen::VectorXd &theta, const Eigen::MatrixXd &vis,
                                         VisCache *cache) const {
  check(vis.rows() == cfg_.vis_dim(), "visual batch has wrong row count");
  VisCache local;
  VisCache &c = cache ? *cache : local;
  if (cfg_.encoder == EncoderMode::Flat) {
    c.input = vis;
    c.pre = nn::linear(view(theta, layout_->at("enc.w")), view(theta, layout_->at("enc.b")), vis);
    return nn::relu(c.pre);
  }
  c.input = vis;
  c.patches1 = nn::im2col(conv1_, vis);
  c.pre1 = nn::conv2d(conv1_, view(theta, layout_->at("enc.conv1.w")),
                      view(theta, layout_->at("enc.conv1.b")), c.patches1, vis.cols());
  c.act1 = nn::relu(c.pre1);
  c.patches2 = nn::im2col(conv2_, c.act1);
  c.pre2 = nn::conv2d(conv2_, view(theta, layout_->at("enc.conv2.w")),
                      view(theta, layout_->at("enc.conv2.b")), c.patches2, vis.cols());
  c.act2 = nn::relu(c.pre2);
  c.pre = nn::linear(view(theta, layout_->at("enc.proj.w")), view(theta, layout_->at("enc.proj.b")),
                     c.act2);
  return nn::relu(c.pre);
}

void Network::visual_features_backward(const Eigen::VectorXd &theta, const VisCache &cache,
                                       const Eigen::MatrixXd &dfeat, Eigen::VectorXd &grad) const {
  const Eigen::MatrixXd dpre = nn::relu_backward(cache.pre, dfeat);
  if (cfg_.encoder == EncoderMode::Flat) {
    nn::linear_backward(view(theta, layout_->at("enc.w")), cache.input, dpre,
                        view(grad, layout_->at("enc.w")), view(grad, layout_->at("enc.b")));
    return;
  }
  Eigen::MatrixXd dact2 =
      nn::linear_backward(view(theta, layout_->at("enc.proj.w")), cache.act2, dpre,
                          view(grad, layout_->at("enc.proj.w")), view(grad, layout_->at("enc.proj.b")));
  Eigen::MatrixXd dpre2 = nn::relu_backward(cache.pre2, dact2);
  Eigen::MatrixXd dpatches2 =
      nn::conv2d_backward(conv2_, view(theta, layout_->at("enc.conv2.w")), cache.patches2, dpre2,
                          view(grad, layout_->at("enc.conv2.w")), view(grad, layout_->at("enc.conv2.b")));
  Eigen::MatrixXd dact1 = nn::col2im(conv2_, dpatches2, dpre2.cols());
  Eigen::MatrixXd dpre1 = nn::relu_backward(cache.pre1, dact1);
  nn::conv2d_backward(conv1_, view(theta, layout_->at("enc.conv1.w")), cache.patches1, dpre1,
                      view(grad, layout_->at("enc.conv1.w")), view(grad, layout_->at("enc.conv1.b")));
}

Eigen::MatrixXd Network::encode(const Eigen::VectorXd &theta, const Eigen::MatrixXd &vis_feat,
                                const Eigen::MatrixXd &actions, const Eigen::MatrixXd &proprio,
                                const std::vector<int> &task_index, CondCache *cache) const {
  const Eigen::Index k = vis_feat.cols();
  check(vis_feat.rows() == cfg_.embed_dim, "visual features have wrong dimension");
  check(actions.rows() == kActionDim && actions.cols() == k, "action batch shape mismatch");
  check(proprio.rows() == kProprioDim && proprio.cols() == k, "proprio batch shape mismatch");

  CondCache local;
  CondCache &c = cache ? *cache : local;
  c.cond_in.resize(cfg_.cond_dim(), k);
  c.cond_in.topRows(kActionDim) = actions;
  c.cond_in.middleRows(kActionDim, kProprioDim) = proprio;
  if (cfg_.context == ContextKind::Embedding) {
    check(static_cast<Eigen::Index>(task_index.size()) == k, "task index batch size mismatch");
    auto table = view(theta, layout_->at("ctx.table"));
    for (Eigen::Index i = 0; i < k; ++i) {
      const int t = task_index[i];
      check(t >= 0 && t < cfg_.task_count, "task index out of range for embedding table");
      c.cond_in.bottomRows(cfg_.task_embed_dim).col(i) = table.col(t);
    }
    c.task_index = task_index;
  }
  return vis_feat +
         nn::linear(view(theta, layout_->at("cond.w")), view(theta, layout_->at("cond.b")), c.cond_in);
}

Eigen::MatrixXd Network::encode_backward(const Eigen::VectorXd &theta, const CondCache &cache,
                                         const Eigen::MatrixXd &demb, Eigen::VectorXd &grad) const {
  Eigen::MatrixXd dcond_in =
      nn::linear_backward(view(theta, layout_->at("cond.w")), cache.cond_in, demb,
                          view(grad, layout_->at("cond.w")), view(grad, layout_->at("cond.b")));
  if (cfg_.context == ContextKind::Embedding) {
    auto dtable = view(grad, layout_->at("ctx.table"));
    for (Eigen::Index i = 0; i < demb.cols(); ++i)
      dtable.col(cache.task_index[i]) += dcond_in.bottomRows(cfg_.task_embed_dim).col(i);
  }
  return demb;  // d(vis_feat): the embedding is vis_feat + projection
}

Eigen::MatrixXd Network::mlp_forward(const Eigen::VectorXd &theta, const std::string &prefix,
                                     int n_hidden, const Eigen::MatrixXd &input,
                                     MlpCache *cache) const {
  MlpCache local;
  MlpCache &c = cache ? *cache : local;
  c.input = input;
  c.pre.clear();
  c.post.clear();
  const Eigen::MatrixXd *x = &c.input;
  for (int i = 0; i < n_hidden; ++i) {
    const std::string si = std::to_string(i);
    c.pre.push_back(nn::linear(view(theta, layout_->at(prefix + ".w" + si)),
                               view(theta, layout_->at(prefix + ".b" + si)), *x));
    c.post.push_back(nn::relu(c.pre.back()));
    x = &c.post.back();
  }
  c.out = nn::linear(view(theta, layout_->at(prefix + ".wo")), view(theta, layout_->at(prefix + ".bo")), *x);
  return c.out;
}

Eigen::MatrixXd Network::mlp_backward(const Eigen::VectorXd &theta, const std::string &prefix,
                                      int n_hidden, const MlpCache &cache,
                                      const Eigen::MatrixXd &dout, Eigen::VectorXd &grad) const {
  const Eigen::MatrixXd &last = n_hidden > 0 ? cache.post.back() : cache.input;
  Eigen::MatrixXd dx = nn::linear_backward(view(theta, layout_->at(prefix + ".wo")), last, dout,
                                           view(grad, layout_->at(prefix + ".wo")),
                                           view(grad, layout_->at(prefix + ".bo")));
  for (int i = n_hidden - 1; i >= 0; --i) {
    const std::string si = std::to_string(i);
    Eigen::MatrixXd dpre = nn::relu_backward(cache.pre[i], dx);
    const Eigen::MatrixXd &x = i > 0 ? cache.post[i - 1] : cache.input;
    dx = nn::linear_backward(view(theta, layout_->at(prefix + ".w" + si)), x, dpre,
                             view(grad, layout_->at(prefix + ".w" + si)),
                             view(grad, layout_->at(prefix + ".b" + si)));
  }
  return dx;
}

Eigen::VectorXd Network::q_values(const Eigen::VectorXd &theta, const Eigen::MatrixXd &emb,
                                  MlpCache *cache) const {
  MlpCache local;
  MlpCache &c = cache ? *cache : local;
  mlp_forward(theta, "q", static_cast<int>(cfg_.q_hidden.size()), emb, &c);
  c.q.resize(c.out.cols());
  for (Eigen::Index i = 0; i < c.out.cols(); ++i) {
    const double s = nn::sigmoid(c.out(0, i));
    c.q[i] = std::min(1.0 - kQClampEps, std::max(kQClampEps, s));
  }
  return c.q;
}

Eigen::MatrixXd Network::q_values_backward(const Eigen::VectorXd &theta, const MlpCache &cache,
                                           const Eigen::VectorXd &dq, Eigen::VectorXd &grad) const {
  Eigen::MatrixXd dlogit(1, dq.size());
  for (Eigen::Index i = 0; i < dq.size(); ++i) {
    const double s = nn::sigmoid(cache.out(0, i));
    const bool clamped = s <= kQClampEps || s >= 1.0 - kQClampEps;
    dlogit(0, i) = clamped ? 0.0 : dq[i] * s * (1.0 - s);
  }
  return mlp_backward(theta, "q", static_cast<int>(cfg_.q_hidden.size()), cache, dlogit, grad);
}

Eigen::MatrixXd Network::forward_mu(const Eigen::VectorXd &theta, const Eigen::MatrixXd &emb,
                                    MlpCache *cache) const {
  check(cfg_.pi_heads, "forward encoder head is disabled in this network");
  MlpCache local;
  MlpCache &c = cache ? *cache : local;
  mlp_forward(theta, "fwd", static_cast<int>(cfg_.pi_hidden.size()), emb, &c);
  c.mu = nn::normalize_columns(c.out, &c.norms);
  return c.mu;
}

Eigen::MatrixXd Network::forward_mu_backward(const Eigen::VectorXd &theta, const MlpCache &cache,
                                             const Eigen::MatrixXd &dmu, Eigen::VectorXd &grad) const {
  const Eigen::MatrixXd dout = nn::normalize_columns_backward(cache.mu, cache.norms, dmu);
  return mlp_backward(theta, "fwd", static_cast<int>(cfg_.pi_hidden.size()), cache, dout, grad);
}

Eigen::MatrixXd Network::backward_mu(const Eigen::VectorXd &theta, const Eigen::MatrixXd &lagged_emb,
                                     const Eigen::VectorXd &rewards, MlpCache *cache) const {
  check(cfg_.pi_heads, "backward encoder head is disabled in this network");
  check(lagged_emb.rows() == cfg_.embed_dim, "lagged embedding has wrong dimension");
  check(rewards.size() == lagged_emb.cols(), "reward batch size mismatch");
  Eigen::MatrixXd input(cfg_.embed_dim + 1, lagged_emb.cols());
  input.topRows(cfg_.embed_dim) = lagged_emb;
  input.bottomRows(1) = rewards.transpose();
  MlpCache local;
  MlpCache &c = cache ? *cache : local;
  mlp_forward(theta, "bwd", static_cast<int>(cfg_.pi_hidden.size()), input, &c);
  c.mu = nn::normalize_columns(c.out, &c.norms);
  return c.mu;
}

void Network::backward_mu_backward(const Eigen::VectorXd &theta, const MlpCache &cache,
                                   const Eigen::MatrixXd &dmu, Eigen::VectorXd &grad) const {
  const Eigen::MatrixXd dout = nn::normalize_columns_backward(cache.mu, cache.norms, dmu);
  mlp_backward(theta, "bwd", static_cast<int>(cfg_.pi_hidden.size()), cache, dout, grad);
}

// ---------------------------------------------------------------------------
// NetworkConfig JSON
// ---------------------------------------------------------------------------

void to_json(nlohmann::json &j, const NetworkConfig &c) {
  j = nlohmann::json{
      {"encoder", c.encoder == EncoderMode::Flat ? "flat" : "conv_tiny"},
      {"context", c.context == ContextKind::ImageMask ? "image_mask" : "embedding"},
      {"grid_side", c.grid_side},
      {"obs_channels", c.obs_channels},
      {"embed_dim", c.embed_dim},
      {"q_hidden", c.q_hidden},
      {"pi_hidden", c.pi_hidden},
      {"z_dim", c.z_dim},
      {"task_embed_dim", c.task_embed_dim},
      {"task_count", c.task_count},
      {"conv_channels1", c.conv_channels1},
      {"conv_channels2", c.conv_channels2},
      {"pi_heads", c.pi_heads},
  };
}

void from_json(const nlohmann::json &j, NetworkConfig &c) {
  const std::string enc = j.value("encoder", "flat");
  if (enc == "flat") {
    c.encoder = EncoderMode::Flat;
  } else if (enc == "conv_tiny") {
    c.encoder = EncoderMode::ConvTiny;
  } else {
    throw ConfigError("encoder must be \"flat\" or \"conv_tiny\", got \"" + enc + "\"");
  }
  const std::string ctx = j.value("context", "image_mask");
  if (ctx == "image_mask") {
    c.context = ContextKind::ImageMask;
  } else if (ctx == "embedding") {
    c.context = ContextKind::Embedding;
  } else {
    throw ConfigError("context must be \"image_mask\" or \"embedding\", got \"" + ctx + "\"");
  }
  c.grid_side = j.value("grid_side", c.grid_side);
  c.obs_channels = j.value("obs_channels", c.obs_channels);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.q_hidden = j.value("q_hidden", c.q_hidden);
  c.pi_hidden = j.value("pi_hidden", c.pi_hidden);
  c.z_dim = j.value("z_dim", c.z_dim);
  c.task_embed_dim = j.value("task_embed_dim", c.task_embed_dim);
  c.task_count = j.value("task_count", c.task_count);
  c.conv_channels1 = j.value("conv_channels1", c.conv_channels1);
  c.conv_channels2 = j.value("conv_channels2", c.conv_channels2);
  c.pi_heads = j.value("pi_heads", c.pi_heads);
}

// ---------------------------------------------------------------------------
// Checkpoint IO
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'P', 'I', 'Q', 'T'};
constexpr std::uint32_t kFormatVersion = 1;

void write_u32(std::ostream &os, std::uint32_t v) { os.write(reinterpret_cast<const char *>(&v), 4); }
void write_u64(std::ostream &os, std::uint64_t v) { os.write(reinterpret_cast<const char *>(&v), 8); }

std::uint32_t read_u32(std::istream &is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char *>(&v), 4)) throw CheckpointError("truncated checkpoint header");
  return v;
}
std::uint64_t read_u64(std::istream &is) {
  std::uint64_t v = 0;
  if (!is.read(reinterpret_cast<char *>(&v), 8)) throw CheckpointError("truncated checkpoint header");
  return v;
}

void write_vec(std::ostream &os, const Eigen::VectorXd &v) {
  if (v.size() > 0)
    os.write(reinterpret_cast<const char *>(v.data()), static_cast<std::streamsize>(v.size() * 8));
}

Eigen::VectorXd read_vec(std::istream &is, Eigen::Index n) {
  Eigen::VectorXd v(n);
  if (n > 0 && !is.read(reinterpret_cast<char *>(v.data()), static_cast<std::streamsize>(n * 8)))
    throw CheckpointError("truncated checkpoint: parameter section too short");
  return v;
}

}  // namespace

void save_checkpoint(const std::string &path, const CheckpointContents &c) {
  const Eigen::Index n = c.theta.values.size();
  if (c.theta1.size() != n || c.theta2.size() != n)
    throw CheckpointError("lagged parameter vectors must match theta's size");
  if (c.momentum.size() != 0 && c.momentum.size() != n)
    throw CheckpointError("momentum vector must match theta's size");

  nlohmann::json layout_json = nlohmann::json::array();
  for (const Block &b : c.theta.layout->blocks)
    layout_json.push_back({b.name, b.offset, b.rows, b.cols});
  nlohmann::json header{
      {"format", kFormatVersion},
      {"param_count", n},
      {"theta_version", c.theta.version},
      {"layout", layout_json},
      {"net", c.net},
      {"momentum", c.momentum.size() != 0},
      {"replay_bytes", c.replay_blob.size()},
      {"meta", c.meta},
  };
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot open checkpoint for writing: " + path);
  os.write(kMagic, 4);
  write_u32(os, kFormatVersion);
  write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  write_u64(os, static_cast<std::uint64_t>(n));
  write_vec(os, c.theta.values);
  write_vec(os, c.theta1);
  write_vec(os, c.theta2);
  if (c.momentum.size() != 0) write_vec(os, c.momentum);
  if (!c.replay_blob.empty())
    os.write(c.replay_blob.data(), static_cast<std::streamsize>(c.replay_blob.size()));
  if (!os) throw CheckpointError("failed writing checkpoint: " + path);
}

CheckpointContents load_checkpoint(const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open checkpoint: " + path);

  char magic[4] = {};
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw CheckpointError("bad checkpoint magic (not a PIQT file): " + path);
  const std::uint32_t format = read_u32(is);
  if (format != kFormatVersion)
    throw CheckpointError("unsupported checkpoint format version " + std::to_string(format));

  const std::uint64_t text_len = read_u64(is);
  if (text_len > (1ull << 30)) throw CheckpointError("checkpoint header length is implausible");
  std::string text(text_len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(text_len)))
    throw CheckpointError("truncated checkpoint: header block too short");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error &e) {
    throw CheckpointError(std::string("corrupt checkpoint header JSON: ") + e.what());
  }

  CheckpointContents c;
  c.net = header.at("net").get<NetworkConfig>();
  auto layout = std::make_shared<Layout>();
  for (const auto &row : header.at("layout")) {
    Block b{row.at(0).get<std::string>(), row.at(1).get<Eigen::Index>(), row.at(2).get<Eigen::Index>(),
            row.at(3).get<Eigen::Index>()};
    if (b.offset != layout->total) throw CheckpointError("checkpoint layout has gaps or overlaps");
    layout->blocks.push_back(b);
    layout->total += b.size();
  }

  const std::uint64_t declared = read_u64(is);
  const auto n = static_cast<Eigen::Index>(header.at("param_count").get<std::uint64_t>());
  if (static_cast<Eigen::Index>(declared) != n || layout->total != n)
    throw CheckpointError("checkpoint parameter count disagrees with layout");

  c.theta.layout = std::move(layout);
  c.theta.values = read_vec(is, n);
  c.theta.version = header.at("theta_version").get<std::uint64_t>();
  c.theta1 = read_vec(is, n);
  c.theta2 = read_vec(is, n);
  if (header.at("momentum").get<bool>()) c.momentum = read_vec(is, n);
  const auto replay_bytes = header.at("replay_bytes").get<std::uint64_t>();
  if (replay_bytes > 0) {
    c.replay_blob.resize(replay_bytes);
    if (!is.read(c.replay_blob.data(), static_cast<std::streamsize>(replay_bytes)))
      throw CheckpointError("truncated checkpoint: replay section too short");
  }
  c.meta = header.value("meta", nlohmann::json::object());
  if (is.peek() != std::char_traits<char>::eof())
    throw CheckpointError("checkpoint has trailing bytes beyond declared sections");
  return c;
}

}  // namespace piqt
