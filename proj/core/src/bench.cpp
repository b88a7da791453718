#include "scl/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "scl/rng.hpp"
#include "scl/shapeconv.hpp"

namespace scl {

const char* to_string(BenchKind k) {
  switch (k) {
    case BenchKind::vanilla: return "vanilla";
    case BenchKind::shapeconv_unfused: return "shapeconv-unfused";
    default: return "shapeconv-fused";
  }
}

i64 conv_forward_flops(const ConvConfig& cfg, i64 batch, i64 h, i64 w) {
  const i64 positions = batch * cfg.out_h(h) * cfg.out_w(w) * cfg.c_out;
  const i64 taps = static_cast<i64>(cfg.kh) * cfg.kw * cfg.c_in;
  return positions * (2 * taps - 1 + (cfg.has_bias ? 1 : 0));
}

// Op count of the assembly loop: per (c_in, c_out) pair one spatial mean
// (n adds + 1 multiply), the base delta (2), and per target position n
// fused multiply-adds over shifted weights and residuals (4 ops each) plus
// the final two adds.
i64 assemble_flops(const ConvConfig& cfg) {
  const i64 n = static_cast<i64>(cfg.kh) * cfg.kw;
  return static_cast<i64>(cfg.c_in) * cfg.c_out * (n + 3 + n * (4 * n + 2));
}

i64 conv_param_count(const ConvConfig& cfg) {
  return static_cast<i64>(cfg.kh) * cfg.kw * cfg.c_in * cfg.c_out +
         (cfg.has_bias ? cfg.c_out : 0);
}

i64 shapeconv_param_count(const ConvConfig& cfg) {
  const i64 n = static_cast<i64>(cfg.kh) * cfg.kw;
  return conv_param_count(cfg) + 1 + n * n * cfg.c_in;
}

namespace {

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double iqr_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return v[(3 * n) / 4] - v[n / 4];
}

}  // namespace

std::vector<BenchEntry> bench_forward(const BenchCase& bench_case, std::uint64_t seed) {
  const ConvConfig& cfg = bench_case.cfg;
  cfg.validate();
  if (bench_case.runs < 30) throw std::invalid_argument("need at least 30 timed runs");
  if (bench_case.warmup < 5) throw std::invalid_argument("need at least 5 warmup runs");

  // Trained-like parameters: perturbed away from the identity so fusion does
  // real work.
  ShapeConvParams<float> params = init_params<float>(cfg, seed);
  Xoshiro256 rng(derive_seed(seed, 17));
  params.base_weight[0] = 0.8f;
  for (i64 i = 0; i < params.shape_weight.size(); ++i)
    params.shape_weight[i] += static_cast<float>(rng.normal() * 0.05);
  if (cfg.has_bias)
    for (i64 i = 0; i < params.bias.size(); ++i)
      params.bias[i] = static_cast<float>(rng.normal() * 0.1);

  Tensor<float> x({bench_case.batch, cfg.c_in, bench_case.height, bench_case.width});
  for (i64 i = 0; i < x.size(); ++i) x[i] = static_cast<float>(rng.normal());

  const FusedConv<float> fused = fuse(params);
  const Tensor<float>* bias = cfg.has_bias ? &fused.bias : nullptr;

  // Never benchmark divergent computations: all three kinds must agree.
  {
    const Tensor<float> ref = conv2d(x, fused.kernel, bias, cfg);
    const Tensor<float> unfused_out = shapeconv_forward(x, params);
    if (max_abs_diff(ref, unfused_out) > 1e-6)
      throw std::runtime_error("bench kinds disagree before timing");
  }

  using clock = std::chrono::steady_clock;
  float sink = 0.0f;
  auto timed_us = [&](auto&& fn) {
    const auto t0 = clock::now();
    const Tensor<float> out = fn();
    const auto t1 = clock::now();
    sink += out[out.size() / 2];
    return std::chrono::duration<double, std::micro>(t1 - t0).count();
  };

  auto run_vanilla = [&] { return conv2d(x, fused.kernel, bias, cfg); };
  auto run_unfused = [&] { return shapeconv_forward(x, params); };
  auto run_fused = [&] { return conv2d(x, fused.kernel, bias, cfg); };

  for (int i = 0; i < bench_case.warmup; ++i) {
    timed_us(run_vanilla);
    timed_us(run_unfused);
    timed_us(run_fused);
  }

  std::vector<double> t_vanilla, t_unfused, t_fused;
  t_vanilla.reserve(static_cast<size_t>(bench_case.runs));
  t_unfused.reserve(static_cast<size_t>(bench_case.runs));
  t_fused.reserve(static_cast<size_t>(bench_case.runs));
  for (int i = 0; i < bench_case.runs; ++i) {
    t_vanilla.push_back(timed_us(run_vanilla));
    t_unfused.push_back(timed_us(run_unfused));
    t_fused.push_back(timed_us(run_fused));
  }
  if (sink == 12345.678f) std::fputs("", stderr);  // keep the outputs alive

  const i64 conv_flops = conv_forward_flops(cfg, bench_case.batch, bench_case.height,
                                            bench_case.width);
  std::vector<BenchEntry> entries;
  entries.push_back({bench_case.name, BenchKind::vanilla, median_of(t_vanilla),
                     iqr_of(t_vanilla), conv_flops, conv_param_count(cfg)});
  entries.push_back({bench_case.name, BenchKind::shapeconv_unfused, median_of(t_unfused),
                     iqr_of(t_unfused), conv_flops + assemble_flops(cfg),
                     shapeconv_param_count(cfg)});
  entries.push_back({bench_case.name, BenchKind::shapeconv_fused, median_of(t_fused),
                     iqr_of(t_fused), conv_flops, conv_param_count(cfg)});
  return entries;
}

void append_bench_csv(const std::string& path, std::span<const BenchEntry> entries) {
  const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  std::ofstream os(path, std::ios::app);
  if (!os) throw std::runtime_error("cannot open bench csv for append: " + path);
  if (fresh) os << "case,kind,median_us,iqr_us,flops,params\n";
  char buf[256];
  for (const BenchEntry& e : entries) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.3f,%.3f,%lld,%lld\n", e.case_name.c_str(),
                  to_string(e.kind), e.median_us, e.iqr_us,
                  static_cast<long long>(e.flops), static_cast<long long>(e.params));
    os << buf;
  }
}

}  // namespace scl
