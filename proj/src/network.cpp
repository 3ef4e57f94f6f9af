#include "latreg/network.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "latreg/errors.hpp"

namespace latreg {

void BackboneConfig::validate() const {
  if (levels < 2 || levels > 5) {
    throw ConfigError("backbone levels must be in 2..5");
  }
  if (static_cast<int>(channels.size()) != levels) {
    throw ConfigError("backbone channels list must have one entry per level");
  }
  for (int c : channels) {
    if (c < 1) throw ConfigError("backbone channels must be >= 1");
  }
  if (input_channels != 2) {
    throw ConfigError("backbone expects a two-channel image pair input");
  }
  if (!(lambda_scale > 0.0)) throw ConfigError("lambda_scale must be > 0");
  if (!(sigma_min < sigma_max)) throw ConfigError("sigma_min must be < sigma_max");
}

SampleResult sample_latent(const LatentPolicy& policy, Rng& rng) {
  if (policy.tau < 0.0) throw ConfigError("sample_latent: tau must be >= 0");
  SampleResult r;
  r.eps = Tensor(policy.mu.shape());
  for (std::size_t i = 0; i < r.eps.size(); ++i) r.eps[i] = rng.normal();
  if (policy.tau == 0.0) {
    r.z = policy.mu;  // deterministic path, exact
    return r;
  }
  r.z = Tensor(policy.mu.shape());
  for (std::size_t i = 0; i < r.z.size(); ++i) {
    const double sigma = std::exp(policy.log_sigma[i]);
    r.z[i] = policy.mu[i] + policy.tau * (sigma * r.eps[i]);
  }
  return r;
}

double log_pi(const LatentPolicy& policy, const Tensor& z, double s) {
  if (!(s > 0.0)) throw ConfigError("log_pi: scale s must be > 0");
  if (policy.tau <= 0.0) {
    throw ConfigError("log_pi: density undefined at tau = 0");
  }
  require_same_shape(policy.mu, z, "log_pi");
  const double log_2pi_tau2 =
      std::log(2.0 * std::numbers::pi * policy.tau * policy.tau);
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double ls = policy.log_sigma[i];
    const double standardized =
        (z[i] - policy.mu[i]) / (policy.tau * std::exp(ls));
    acc += standardized * standardized + log_2pi_tau2 + 2.0 * ls;
  }
  return -acc / (2.0 * s);
}

ad::Var log_pi_node(ad::Tape& tape, ad::Var mu, ad::Var log_sigma,
                    const Tensor& z, double tau, double s) {
  if (!(s > 0.0)) throw ConfigError("log_pi_node: scale s must be > 0");
  if (tau <= 0.0) throw ConfigError("log_pi_node: density undefined at tau = 0");
  const auto n = static_cast<double>(z.size());
  ad::Var zc = tape.constant(z);
  ad::Var diff = tape.sub(zc, mu);
  ad::Var inv_sigma = tape.exp(tape.neg(log_sigma));
  ad::Var standardized = tape.mul_scalar(tape.mul(diff, inv_sigma), 1.0 / tau);
  ad::Var quad = tape.sum(tape.square(standardized));
  ad::Var log_det = tape.mul_scalar(tape.sum(log_sigma), 2.0);
  const double const_term = n * std::log(2.0 * std::numbers::pi * tau * tau);
  ad::Var total = tape.add_scalar(tape.add(quad, log_det), const_term);
  return tape.mul_scalar(total, -1.0 / (2.0 * s));
}

// --- parameters -------------------------------------------------------------

Tensor& ParamSet::add(const std::string& name, Tensor init) {
  if (contains(name)) {
    throw ConfigError("duplicate parameter name '" + name + "'");
  }
  items_.emplace_back(name, std::move(init));
  return items_.back().second;
}

Tensor& ParamSet::get(const std::string& name) {
  for (auto& [n, t] : items_) {
    if (n == name) return t;
  }
  throw ConfigError("unknown parameter '" + name + "'");
}

const Tensor& ParamSet::get(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return t;
  }
  throw ConfigError("unknown parameter '" + name + "'");
}

bool ParamSet::contains(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return true;
  }
  return false;
}

std::size_t ParamSet::total_elements() const {
  std::size_t n = 0;
  for (const auto& [name, t] : items_) n += t.size();
  return n;
}

// --- network ----------------------------------------------------------------

namespace {

constexpr double kLeakySlope = 0.2;
constexpr int kConvKernel = 3;

Tensor he_init(const Shape& shape, Rng& rng, double scale = 1.0) {
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) {
    fan_in *= static_cast<std::size_t>(shape[i]);
  }
  const double std_dev = scale * std::sqrt(2.0 / static_cast<double>(fan_in));
  Tensor t(shape);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std_dev * rng.normal();
  return t;
}

}  // namespace

RegistrationNet::RegistrationNet(BackboneConfig cfg, std::uint64_t init_seed)
    : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(init_seed);
  const auto& ch = cfg_.channels;
  const int levels = cfg_.levels;

  params_.add("enc.l1.w", he_init({ch[0], cfg_.input_channels, kConvKernel,
                                   kConvKernel, kConvKernel},
                                  rng));
  params_.add("enc.l1.b", Tensor({ch[0]}));
  for (int l = 2; l <= levels; ++l) {
    const std::string base = "enc.l" + std::to_string(l);
    params_.add(base + ".w",
                he_init({ch[static_cast<std::size_t>(l - 1)],
                         ch[static_cast<std::size_t>(l - 2)], kConvKernel,
                         kConvKernel, kConvKernel},
                        rng));
    params_.add(base + ".b", Tensor({ch[static_cast<std::size_t>(l - 1)]}));
  }
  const int cl = ch[static_cast<std::size_t>(levels - 1)];
  // Small mean head keeps tanh in its linear range at the start; the
  // log-sigma head starts at zero so sigma = 1.
  params_.add("enc.mu_head.w", he_init({cl, cl, 1, 1, 1}, rng, 0.05));
  params_.add("enc.mu_head.b", Tensor({cl}));
  params_.add("enc.logsig_head.w", Tensor({cl, cl, 1, 1, 1}));
  params_.add("enc.logsig_head.b", Tensor({cl}));

  params_.add("dec.bottom.w",
              he_init({ch[static_cast<std::size_t>(levels - 2)], cl, kConvKernel,
                       kConvKernel, kConvKernel},
                      rng));
  params_.add("dec.bottom.b", Tensor({ch[static_cast<std::size_t>(levels - 2)]}));
  int carried = ch[static_cast<std::size_t>(levels - 2)];
  for (int l = levels - 1; l >= 1; --l) {
    const int skip_ch = ch[static_cast<std::size_t>(l - 1)];
    const std::string base = "dec.fuse" + std::to_string(l);
    params_.add(base + ".w", he_init({skip_ch, carried + skip_ch, kConvKernel,
                                      kConvKernel, kConvKernel},
                                     rng));
    params_.add(base + ".b", Tensor({skip_ch}));
    carried = skip_ch;
  }
  // Zero flow head: the initial deformation is the identity.
  params_.add("dec.flow.w",
              Tensor({3, carried, kConvKernel, kConvKernel, kConvKernel}));
  params_.add("dec.flow.b", Tensor({3}));
}

EncodeResult RegistrationNet::encode(ad::Tape& tape, const Tensor& moving,
                                     const Tensor& fixed) const {
  require_same_shape(moving, fixed, "encode");
  if (moving.rank() != 3) {
    throw ShapeError("encode: volumes must be rank-3 (D, H, W), got " +
                     shape_to_string(moving.shape()));
  }
  const int df = cfg_.downsample_factor();
  for (int ax = 0; ax < 3; ++ax) {
    if (moving.extent(ax) % df != 0) {
      throw ShapeError("encode: extents " + shape_to_string(moving.shape()) +
                       " must be divisible by " + std::to_string(df));
    }
  }
  const int d = moving.extent(0), h = moving.extent(1), w = moving.extent(2);
  Tensor pair = concat_channels(moving.reshaped({1, d, h, w}),
                                fixed.reshaped({1, d, h, w}));
  ad::Var x = tape.constant(std::move(pair));

  EncodeResult out;
  ad::Var f = x;
  for (int l = 1; l <= cfg_.levels; ++l) {
    const std::string base = "enc.l" + std::to_string(l);
    ad::Var wv = tape.leaf(base + ".w", params_.get(base + ".w"));
    ad::Var bv = tape.leaf(base + ".b", params_.get(base + ".b"));
    const int stride = l == 1 ? 1 : 2;
    f = tape.leaky_relu(
        tape.add_channel_bias(tape.conv3d(f, wv, stride, 1), bv), kLeakySlope);
    if (l < cfg_.levels) out.skips.push_back(f);
  }

  ad::Var mu_w = tape.leaf("enc.mu_head.w", params_.get("enc.mu_head.w"));
  ad::Var mu_b = tape.leaf("enc.mu_head.b", params_.get("enc.mu_head.b"));
  ad::Var raw_mu = tape.add_channel_bias(tape.conv3d(f, mu_w, 1, 0), mu_b);
  out.mu = tape.mul_scalar(tape.tanh(raw_mu), cfg_.lambda_scale);

  ad::Var ls_w = tape.leaf("enc.logsig_head.w", params_.get("enc.logsig_head.w"));
  ad::Var ls_b = tape.leaf("enc.logsig_head.b", params_.get("enc.logsig_head.b"));
  ad::Var raw_ls = tape.add_channel_bias(tape.conv3d(f, ls_w, 1, 0), ls_b);
  out.log_sigma = tape.clip(raw_ls, cfg_.sigma_min, cfg_.sigma_max);
  return out;
}

ad::Var RegistrationNet::decode(ad::Tape& tape,
                                const std::vector<ad::Var>& skips,
                                ad::Var z) const {
  if (static_cast<int>(skips.size()) != cfg_.levels - 1) {
    throw ShapeError("decode: expected " + std::to_string(cfg_.levels - 1) +
                     " skip features, got " + std::to_string(skips.size()));
  }
  ad::Var h = tape.leaky_relu(
      tape.add_channel_bias(
          tape.conv3d(z, tape.leaf("dec.bottom.w", params_.get("dec.bottom.w")),
                      1, 1),
          tape.leaf("dec.bottom.b", params_.get("dec.bottom.b"))),
      kLeakySlope);
  for (int l = cfg_.levels - 1; l >= 1; --l) {
    h = tape.upsample_trilinear(h, 2);
    h = tape.concat_channels(h, skips[static_cast<std::size_t>(l - 1)]);
    const std::string base = "dec.fuse" + std::to_string(l);
    h = tape.leaky_relu(
        tape.add_channel_bias(
            tape.conv3d(h, tape.leaf(base + ".w", params_.get(base + ".w")), 1, 1),
            tape.leaf(base + ".b", params_.get(base + ".b"))),
        kLeakySlope);
  }
  return tape.add_channel_bias(
      tape.conv3d(h, tape.leaf("dec.flow.w", params_.get("dec.flow.w")), 1, 1),
      tape.leaf("dec.flow.b", params_.get("dec.flow.b")));
}

LatentPolicy RegistrationNet::encode_policy(const Tensor& moving,
                                            const Tensor& fixed,
                                            double tau) const {
  ad::Tape tape;
  EncodeResult enc = encode(tape, moving, fixed);
  LatentPolicy p;
  p.mu = enc.mu.value();
  p.log_sigma = enc.log_sigma.value();
  p.lambda_scale = cfg_.lambda_scale;
  p.sigma_min = cfg_.sigma_min;
  p.sigma_max = cfg_.sigma_max;
  p.tau = tau;
  return p;
}

DisplacementField RegistrationNet::forward_field(const Tensor& moving,
                                                 const Tensor& fixed) const {
  ad::Tape tape;
  EncodeResult enc = encode(tape, moving, fixed);
  ad::Var u = decode(tape, enc.skips, enc.mu);  // tau = 0 deterministic latent
  return DisplacementField(u.value());
}

void RegistrationNet::save(const std::filesystem::path& path) const {
  save_params(path, params_);
}

RegistrationNet RegistrationNet::load(const std::filesystem::path& path,
                                      const BackboneConfig& cfg) {
  RegistrationNet net(cfg, 0);
  ParamSet loaded = load_params(path);
  for (auto& [name, tensor] : net.params_.items()) {
    if (!loaded.contains(name)) {
      throw DataError("checkpoint " + path.string() + " is missing parameter '" +
                      name + "'");
    }
    const Tensor& found = loaded.get(name);
    if (!found.same_shape(tensor)) {
      throw DataError("checkpoint parameter '" + name + "' has shape " +
                      shape_to_string(found.shape()) + ", config expects " +
                      shape_to_string(tensor.shape()));
    }
    tensor = found;
  }
  return net;
}

// --- checkpoint io ------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'S', 'K', '1'};
constexpr std::uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint io assumes a little-endian host");

template <class T>
void write_pod(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& is, const std::string& path, const char* what) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) {
    throw DataError("checkpoint " + path + ": truncated while reading " + what);
  }
  return v;
}

}  // namespace

void save_params(const std::filesystem::path& path, const ParamSet& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open " + path.string() + " for writing");
  os.write(kMagic, 4);
  write_pod(os, kVersion);
  write_pod(os, static_cast<std::uint32_t>(params.items().size()));
  for (const auto& [name, tensor] : params.items()) {
    write_pod(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod(os, static_cast<std::uint8_t>(tensor.rank()));
    for (int ax = 0; ax < tensor.rank(); ++ax) {
      write_pod(os, static_cast<std::uint32_t>(tensor.extent(ax)));
    }
    os.write(reinterpret_cast<const char*>(tensor.data()),
             static_cast<std::streamsize>(tensor.size() * sizeof(double)));
  }
  if (!os) throw DataError("write failed for " + path.string());
}

ParamSet load_params(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path.string());
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) {
    throw DataError("checkpoint " + path.string() + ": bad magic at offset 0");
  }
  const auto version = read_pod<std::uint32_t>(is, path.string(), "version");
  if (version != kVersion) {
    throw DataError("checkpoint " + path.string() + ": unsupported version " +
                    std::to_string(version));
  }
  const auto count = read_pod<std::uint32_t>(is, path.string(), "parameter count");
  ParamSet out;
  for (std::uint32_t p = 0; p < count; ++p) {
    const auto name_len = read_pod<std::uint16_t>(is, path.string(), "name length");
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw DataError("checkpoint " + path.string() + ": truncated name");
    const auto rank = read_pod<std::uint8_t>(is, path.string(), "rank");
    if (rank < 1 || rank > 5) {
      throw DataError("checkpoint " + path.string() + ": parameter '" + name +
                      "' has invalid rank " + std::to_string(rank));
    }
    Shape shape(rank);
    for (std::uint8_t ax = 0; ax < rank; ++ax) {
      const auto e = read_pod<std::uint32_t>(is, path.string(), "extent");
      if (e == 0 || e > (1u << 24)) {
        throw DataError("checkpoint " + path.string() + ": extent overflow in '" +
                        name + "'");
      }
      shape[ax] = static_cast<int>(e);
    }
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!is) {
      throw DataError("checkpoint " + path.string() + ": truncated payload in '" +
                      name + "'");
    }
    out.add(name, std::move(t));
  }
  return out;
}

}  // namespace latreg
