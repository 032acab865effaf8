#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <seeg/model/checkpoint.hpp>
#include <seeg/model/net.hpp>

#include <filesystem>
#include <numbers>
#include <random>

using namespace seeg;
using namespace seeg::model;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.token_dim = 2;
  cfg.t_trial = 20;
  cfg.pool_window = 4;
  cfg.pool_stride = 2;  // -> 9 tokens
  cfg.conv_kernel = 5;
  cfg.e_max = 4;
  cfg.feature_dim = 8;
  cfg.head_hidden = 4;
  return cfg;
}

template <typename S>
TrialBatch<S> random_batch(const ModelConfig& cfg, int n_trials, int electrodes,
                           int n_heads, std::uint64_t seed) {
  TrialBatch<S> b;
  b.n_trials = n_trials;
  b.e_max = cfg.e_max;
  b.voltages = MatRM<S>::Zero(b.rows(), cfg.t_trial);
  b.mni = MatX<S>::Zero(b.rows(), 3);
  b.mask.assign(static_cast<size_t>(b.rows()), 0);
  b.electrode_index.assign(static_cast<size_t>(b.rows()), 0);
  b.head_of_trial.resize(static_cast<size_t>(n_trials));
  b.targets.resize(n_trials);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> upos(-80.0, 80.0);
  for (int t = 0; t < n_trials; ++t) {
    b.head_of_trial[static_cast<size_t>(t)] = t % n_heads;
    b.targets[t] = static_cast<S>(g(rng));
    for (int e = 0; e < electrodes; ++e) {
      const Eigen::Index r = Eigen::Index(t) * cfg.e_max + e;
      b.mask[static_cast<size_t>(r)] = 1;
      b.electrode_index[static_cast<size_t>(r)] = e;
      for (int k = 0; k < 3; ++k) b.mni(r, k) = static_cast<S>(upos(rng));
      for (int i = 0; i < cfg.t_trial; ++i)
        b.voltages(r, i) = static_cast<S>(g(rng));
    }
  }
  return b;
}

}  // namespace

TEST_CASE("token count: defaults give 105 tokens from 600 samples") {
  ModelConfig cfg;  // defaults
  CHECK(cfg.n_tokens() == 105);
  CHECK((600 - 80) / 5 + 1 == 105);
  CHECK(cfg.flat_dim() == 5880);
}

TEST_CASE("rbf features: dimension 189 and exact gaussian peak") {
  ModelConfig cfg;
  CHECK(cfg.pe_dim() == 189);
  Eigen::Matrix<double, 3, 1> mni(-90.0, 0.0, 0.0);  // x at the first center
  VecXd f = rbf_features<double>(mni, cfg.rbf_centers, cfg.rbf_variances);
  REQUIRE(f.size() == 189);
  // sigma^2 = 1 entry for the matching center: 1/sqrt(2 pi)
  CHECK(std::abs(f[0] - 1.0 / std::sqrt(2.0 * std::numbers::pi)) < 1e-12);
}

TEST_CASE("identical MNI coordinates give identical encodings") {
  ModelConfig cfg = tiny_config();
  Params<double> p = build_params<double>(cfg, {"A"});
  init_params(p, 3);
  MatX<double> mni(2, 3);
  mni << 12.0, -40.0, 7.0, 12.0, -40.0, 7.0;
  auto enc = spatial_encodings<double>(cfg, p, mni, {1, 1}, {0, 1});
  CHECK((enc.row(0) - enc.row(1)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("fourier-mni features: 48 dims, s=0 gives alternating 0/1") {
  ModelConfig cfg;
  cfg.pe = PeScheme::fourier_mni;
  CHECK(cfg.pe_dim() == 48);
  Eigen::Matrix<double, 3, 1> origin(0.0, 0.0, 0.0);
  VecXd f = fourier_mni_features<double>(origin, cfg.fourier_n_freq);
  for (Eigen::Index i = 0; i < f.size(); i += 2) {
    CHECK(f[i] == 0.0);      // sin(0)
    CHECK(f[i + 1] == 1.0);  // cos(0)
  }
}

TEST_CASE("sinusoidal index features: index 0 alternates 0,1") {
  VecXd f = sinusoidal_index_features<double>(0, 48);
  for (Eigen::Index i = 0; i < 48; i += 2) {
    CHECK(f[i] == 0.0);
    CHECK(f[i + 1] == 1.0);
  }
  CHECK_THROWS_AS(pe_scheme_from("rotary"), std::invalid_argument);
}

TEST_CASE("parameter counts: 2081 per head, 43701 for 21 heads, trunk share") {
  ModelConfig cfg;  // defaults: d=128, hidden=16, e_max=28
  std::vector<std::string> subjects;
  for (int i = 0; i < 21; ++i) subjects.push_back("S" + std::to_string(i));
  Net<float> net(cfg, subjects);
  auto counts = net.counts();
  CHECK(counts.per_head == 2081);
  CHECK(counts.n_heads == 21);
  CHECK(counts.per_head * counts.n_heads == 43701);
  CHECK(counts.shared >= 752768);
  // trunk linear dominates the shared budget
  const auto& trunk = net.params().layout.at("trunk.weight");
  CHECK(trunk.rows * trunk.cols == 5880 * 128);
  CHECK(trunk.rows * trunk.cols + 128 == 752768);
  // the count invariant: total equals the sum over named tensors
  long long total = 0;
  for (const auto& e : net.params().layout.entries) total += e.size();
  CHECK(counts.total == total);
}

TEST_CASE("tokenize: zero input with identity norm gives zero latents") {
  ModelConfig cfg = tiny_config();
  Net<double> net(cfg, {"A"});
  net.init(5);
  net.params().vec("tokenizer.conv.bias").setZero();
  auto batch = random_batch<double>(cfg, 2, 3, 1, 7);
  batch.voltages.setZero();
  // bn in eval mode with mean 0 / var 1 and shift 0 acts as identity scaling
  net.params().vec("tokenizer.bn.shift").setZero();
  MatRM<double> lat = net.tokenize_latents(batch);
  CHECK(lat.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("tokenize: masked electrodes produce zero latents") {
  ModelConfig cfg = tiny_config();
  Net<double> net(cfg, {"A"});
  net.init(6);
  auto batch = random_batch<double>(cfg, 2, 3, 1, 8);  // electrode 3 masked
  MatRM<double> lat = net.tokenize_latents(batch);
  for (int t = 0; t < 2; ++t)
    CHECK(lat.row(t * cfg.e_max + 3).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("conv matches a direct correlation oracle on an impulse") {
  ModelConfig cfg = tiny_config();
  cfg.pool_window = 1;
  cfg.pool_stride = 1;  // expose the pre-pool sequence
  Net<double> net(cfg, {"A"});
  net.init(9);
  net.params().vec("tokenizer.conv.bias").setZero();
  net.params().vec("tokenizer.bn.shift").setZero();

  auto batch = random_batch<double>(cfg, 1, 1, 1, 9);
  batch.voltages.setZero();
  const int t0 = 10;
  batch.voltages(0, t0) = 1.0;

  MatRM<double> lat = net.tokenize_latents(batch);
  auto w = net.params().mat("tokenizer.conv.weight");
  const int kl = cfg.conv_kernel, p = (kl - 1) / 2;
  for (int k = 0; k < cfg.token_dim; ++k)
    for (int t = 0; t < cfg.t_trial; ++t) {
      double want = 0.0;  // correlation: out[t] = sum_j w[j] x[t + j - p]
      for (int j = 0; j < kl; ++j) {
        const int src = t + j - p;
        if (src == t0) want += w(k, j);
      }
      CHECK(lat(0, t * cfg.token_dim + k) == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("transformer block: single token collapses softmax to identity") {
  ModelConfig cfg = tiny_config();
  Net<double> net(cfg, {"A"});
  net.init(11);
  auto w = detail::block_views(net.params(), "block0.time");

  MatXd z(1, 2);
  z << 0.7, -1.3;
  detail::BlockScratch<double> scratch;
  scratch.ensure(4, 2, cfg.ffn_dim());
  MatXd y(1, 2);
  detail::block_forward<double>(w, z, y, scratch);

  // hand-computed: attention over one key returns exactly V
  auto ln = [](const MatXd& x, Eigen::Map<const VecXd> g,
               Eigen::Map<const VecXd> b) {
    MatXd out = x;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      double mu = x.row(i).mean();
      double sd = std::sqrt((x.row(i).array() - mu).square().mean() + 1e-5);
      out.row(i) = ((x.row(i).array() - mu) / sd) * g.transpose().array() +
                   b.transpose().array();
    }
    return out;
  };
  MatXd n1 = ln(z, w.g1, w.s1);
  MatXd v = n1 * w.wv.transpose();
  v.rowwise() += w.bv.transpose();
  MatXd proj = v * w.wo.transpose();
  proj.rowwise() += w.bo.transpose();
  MatXd z2 = z + proj;
  MatXd n2 = ln(z2, w.g2, w.s2);
  MatXd pre = n2 * w.w1.transpose();
  pre.rowwise() += w.b1.transpose();
  MatXd ffn = pre.cwiseMax(0.0) * w.w2.transpose();
  ffn.rowwise() += w.b2.transpose();
  MatXd want = z2 + ffn;
  CHECK((y - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("equal tokens attend uniformly: repeated rows equal the T=1 case") {
  ModelConfig cfg = tiny_config();
  Net<double> net(cfg, {"A"});
  net.init(12);
  auto w = detail::block_views(net.params(), "block0.time");
  detail::BlockScratch<double> scratch;
  scratch.ensure(8, 2, cfg.ffn_dim());

  MatXd z1(1, 2), z5(5, 2);
  z1 << 0.3, 0.9;
  for (int i = 0; i < 5; ++i) z5.row(i) = z1.row(0);
  MatXd y1(1, 2), y5(5, 2);
  detail::block_forward<double>(w, z1, y1, scratch);
  detail::block_forward<double>(w, z5, y5, scratch);
  for (int i = 0; i < 5; ++i)
    CHECK((y5.row(i) - y1.row(0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("time attention does not mix electrodes") {
  ModelConfig cfg = tiny_config();
  cfg.ablate.as = true;
  cfg.ablate.pe = true;
  Net<double> net(cfg, {"A"});
  net.init(13);

  auto batch = random_batch<double>(cfg, 1, 4, 1, 14);
  auto batch_perm = batch;
  // permute electrodes 0<->2 within the trial
  batch_perm.voltages.row(0) = batch.voltages.row(2);
  batch_perm.voltages.row(2) = batch.voltages.row(0);
  batch_perm.mni.row(0) = batch.mni.row(2);
  batch_perm.mni.row(2) = batch.mni.row(0);

  // permute the trunk weight column blocks the same way: flatten order is
  // electrode-major with T*K per electrode
  const Eigen::Index blk = Eigen::Index(cfg.n_tokens()) * cfg.token_dim;
  Net<double> net_perm = net;
  auto wt = net.params().mat("trunk.weight");
  auto wtp = net_perm.params().mat("trunk.weight");
  wtp.middleCols(0 * blk, blk) = wt.middleCols(2 * blk, blk);
  wtp.middleCols(2 * blk, blk) = wt.middleCols(0 * blk, blk);

  VecXd a = net.predict(batch);
  VecXd b = net_perm.predict(batch_perm);
  CHECK(std::abs(a[0] - b[0]) < 1e-9);
}

TEST_CASE("space attention: padding width does not change unmasked outputs") {
  ModelConfig small = tiny_config();
  small.e_max = 5;
  ModelConfig big = small;
  big.e_max = 9;

  Net<float> net_small(small, {"A"});
  net_small.init(15);
  Net<float> net_big(big, {"A"});
  net_big.init(16);
  // identical weights; the trunk gains columns for the extra (masked) slots
  for (const auto& e : net_small.params().layout.entries) {
    if (e.name == "trunk.weight") continue;
    net_big.params().vec(e.name) = net_small.params().vec(e.name);
  }
  const Eigen::Index blk = Eigen::Index(small.n_tokens()) * small.token_dim;
  net_big.params()
      .mat("trunk.weight")
      .leftCols(Eigen::Index(small.e_max) * blk) =
      net_small.params().mat("trunk.weight");
  net_big.bn_running_mean() = net_small.bn_running_mean();
  net_big.bn_running_var() = net_small.bn_running_var();

  auto bs = random_batch<float>(small, 3, 5, 1, 17);
  auto bb = random_batch<float>(big, 3, 5, 1, 18);
  bb.voltages.setZero();
  bb.mni.setZero();
  std::fill(bb.mask.begin(), bb.mask.end(), 0);
  for (int t = 0; t < 3; ++t)
    for (int e = 0; e < 5; ++e) {
      bb.voltages.row(t * big.e_max + e) = bs.voltages.row(t * small.e_max + e);
      bb.mni.row(t * big.e_max + e) = bs.mni.row(t * small.e_max + e);
      bb.mask[size_t(t * big.e_max + e)] = 1;
      bb.electrode_index[size_t(t * big.e_max + e)] = e;
    }

  VecXf a = net_small.predict(bs);
  VecXf b = net_big.predict(bb);
  for (int t = 0; t < 3; ++t)
    CHECK(std::abs(a[t] - b[t]) / std::max(1.f, std::abs(a[t])) < 1e-6f);
}

TEST_CASE("forward output shape, determinism, and all-masked rejection") {
  ModelConfig cfg = tiny_config();
  Net<float> net(cfg, {"A", "B"});
  net.init(19);
  auto batch = random_batch<float>(cfg, 6, 3, 2, 20);
  VecXf p1 = net.predict(batch);
  VecXf p2 = net.predict(batch);
  REQUIRE(p1.size() == 6);
  CHECK(std::memcmp(p1.data(), p2.data(), sizeof(float) * 6) == 0);

  auto bad = batch;
  for (int e = 0; e < cfg.e_max; ++e) bad.mask[size_t(e)] = 0;
  CHECK_THROWS_AS(net.predict(bad), std::invalid_argument);
}

TEST_CASE("zero latents make the trunk output its bias; heads differ") {
  ModelConfig cfg = tiny_config();
  Net<double> net(cfg, {"A", "B"});
  net.init(21);
  net.params().vec("tokenizer.conv.bias").setZero();
  net.params().vec("tokenizer.bn.shift").setZero();
  cfg.validate();

  auto batch = random_batch<double>(cfg, 2, 2, 2, 22);
  batch.voltages.setZero();
  batch.mni.setZero();
  batch.head_of_trial = {0, 1};
  // disable attention/pe influence by zeroing input entirely: latents are
  // zero, so F = trunk bias for every trial
  VecXd preds = net.predict(batch);
  auto bt = net.params().vec("trunk.bias");
  auto head_out = [&](const std::string& sid) {
    VecXd h =
        (net.params().mat("head." + sid + ".w1") * bt +
         net.params().vec("head." + sid + ".b1"))
            .cwiseMax(0.0);
    return (net.params().mat("head." + sid + ".w2") * h)(0, 0) +
           net.params().vec("head." + sid + ".b2")[0];
  };
  // with zero latents the attention blocks still see zero rows (masked
  // electrodes zeroed, unmasked zero input -> block(0) != 0 in general), so
  // assert through the ablated path instead
  ModelConfig plain = tiny_config();
  plain.ablate = {true, true, true, false};
  Net<double> pnet(plain, {"A", "B"});
  pnet.init(21);
  pnet.params().vec("tokenizer.conv.bias").setZero();
  pnet.params().vec("tokenizer.bn.shift").setZero();
  VecXd ppreds = pnet.predict(batch);
  auto pbt = pnet.params().vec("trunk.bias");
  auto phead = [&](const std::string& sid) {
    VecXd h =
        (pnet.params().mat("head." + sid + ".w1") * pbt +
         pnet.params().vec("head." + sid + ".b1"))
            .cwiseMax(0.0);
    return (pnet.params().mat("head." + sid + ".w2") * h)(0, 0) +
           pnet.params().vec("head." + sid + ".b2")[0];
  };
  CHECK(ppreds[0] == doctest::Approx(phead("A")).epsilon(1e-12));
  CHECK(ppreds[1] == doctest::Approx(phead("B")).epsilon(1e-12));
  CHECK(ppreds[0] != ppreds[1]);  // distinct heads
  (void)preds;
  (void)head_out;
}

TEST_CASE("shared-head ablation routes every subject to one head") {
  ModelConfig cfg = tiny_config();
  cfg.ablate.rh = true;
  Net<float> net(cfg, {"A", "B", "C"});
  auto counts = net.counts();
  CHECK(counts.n_heads == 1);
  const long long head_total = counts.per_head * counts.n_heads;
  CHECK(head_total == 4 * cfg.feature_dim + 4 + 4 + 1);
  CHECK(net.params().head_index.at("A") == 0);
  CHECK(net.params().head_index.at("C") == 0);
}

TEST_CASE("flop accounting matches the closed forms") {
  ModelConfig cfg;  // E=28, T=105, K=2
  const long long e = 28, t = 105, k = 2;
  CHECK(attention_flops_factorized(cfg, 1) == e * t * t * k + t * e * e * k);
  CHECK(attention_flops_2d(cfg, 1) == (e * t) * (e * t) * k);
  // factorized/2D = (E+T)/(E*T)
  const double ratio = double(attention_flops_factorized(cfg, 1)) /
                       double(attention_flops_2d(cfg, 1));
  CHECK(ratio == doctest::Approx(double(e + t) / double(e * t)).epsilon(1e-15));
  CHECK(1.0 / ratio == doctest::Approx(22.1).epsilon(0.01));
  // 2D variant sequence length
  CHECK(e * t == 2940);
}

TEST_CASE("2d variant runs and differs from the factorized model") {
  ModelConfig cfg = tiny_config();
  cfg.variant_2d = true;
  Net<float> net(cfg, {"A"});
  net.init(23);
  CHECK(net.params().layout.has("block0.joint.attn.wq"));
  CHECK(!net.params().layout.has("block0.time.attn.wq"));
  CHECK(!net.params().layout.has("pe.proj.weight"));  // PE disabled in 2D
  auto batch = random_batch<float>(cfg, 2, 3, 1, 24);
  VecXf p = net.predict(batch);
  CHECK(p.allFinite());
}

TEST_CASE("checkpoint round-trip reproduces predictions bit for bit") {
  namespace fs = std::filesystem;
  ModelConfig cfg = tiny_config();
  Net<float> net(cfg, {"A", "B"});
  net.init(25);
  // make running stats non-trivial so the state blobs matter
  auto batch = random_batch<float>(cfg, 4, 3, 2, 26);
  VecXf grad;
  net.loss_and_grad(batch, LossKind::huber, 1.0f, nullptr, true);

  VecXf before = net.predict(batch);
  fs::path dir = fs::temp_directory_path() / "seeg_test_ckpt";
  fs::remove_all(dir);
  CheckpointMeta meta;
  meta.seed = 5;
  meta.epoch = 3;
  meta.scaler = {400.0, 100.0};
  save_checkpoint(net, dir, meta);

  CheckpointMeta loaded_meta;
  Net<float> loaded = load_checkpoint<float>(dir, &loaded_meta);
  CHECK(loaded_meta.epoch == 3);
  CHECK(loaded_meta.scaler.mean_ms == 400.0);
  VecXf after = loaded.predict(batch);
  CHECK(std::memcmp(before.data(), after.data(), sizeof(float) * 4) == 0);
}

TEST_CASE("checkpoint shape validation rejects mismatched tensors") {
  namespace fs = std::filesystem;
  ModelConfig cfg = tiny_config();
  Net<float> net(cfg, {"A"});
  net.init(27);
  fs::path dir = fs::temp_directory_path() / "seeg_test_ckpt_bad";
  fs::remove_all(dir);
  CheckpointMeta meta;
  save_checkpoint(net, dir, meta);
  // corrupt the recorded shape of one tensor
  std::ifstream in(dir / "meta.json");
  nlohmann::json j;
  in >> j;
  in.close();
  for (auto& blob : j["blobs"])
    if (blob["name"] == "trunk.weight") blob["cols"] = 999;
  std::ofstream out(dir / "meta.json");
  out << j.dump();
  out.close();
  CHECK_THROWS_WITH_AS(load_checkpoint<float>(dir),
                       doctest::Contains("shape mismatch"), ValidationError);
}

TEST_CASE("config json round-trip and hash stability") {
  ModelConfig cfg;
  cfg.ablate.pe = true;
  cfg.pe = PeScheme::fourier_mni;
  ModelConfig back = ModelConfig::from_json(cfg.to_json());
  CHECK(back.pe == PeScheme::fourier_mni);
  CHECK(back.ablate.pe);
  CHECK(back.hash() == cfg.hash());
  ModelConfig other;
  CHECK(other.hash() != cfg.hash());
}
