#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "scl/conv.hpp"

namespace scl {

enum class BenchKind { vanilla, shapeconv_unfused, shapeconv_fused };
const char* to_string(BenchKind k);

struct BenchCase {
  std::string name;
  i64 batch = 1;
  i64 height = 64, width = 64;
  ConvConfig cfg;
  int runs = 50;    // timed runs per kind, >= 30
  int warmup = 5;   // untimed runs per kind, >= 5
};

struct BenchEntry {
  std::string case_name;
  BenchKind kind = BenchKind::vanilla;
  double median_us = 0.0;
  double iqr_us = 0.0;
  i64 flops = 0;
  i64 params = 0;
};

// Exact forward op counts for one convolution (and for the kernel assembly a
// non-fused shapeconv pays on top). Used both for reporting and for the
// structural zero-overhead claim: a fused layer's flops and parameter count
// equal the vanilla layer's by construction.
i64 conv_forward_flops(const ConvConfig& cfg, i64 batch, i64 h, i64 w);
i64 assemble_flops(const ConvConfig& cfg);
i64 conv_param_count(const ConvConfig& cfg);
i64 shapeconv_param_count(const ConvConfig& cfg);

// Times the three execution kinds on identical inputs and weights: a plain
// convolution with the assembled kernel, the unfused layer (reassembling
// every call), and the fused layer (kernel assembled once up front). Output
// equality across the kinds is asserted before any timing. Runs interleave
// round-robin so clock drift hits all kinds alike; the median and
// interquartile range of per-call wall times are reported.
std::vector<BenchEntry> bench_forward(const BenchCase& bench_case, std::uint64_t seed);

// Appends entries as CSV (case,kind,median_us,iqr_us,flops,params), writing
// the header only when the file is new or empty. Reruns accumulate.
void append_bench_csv(const std::string& path, std::span<const BenchEntry> entries);

}  // namespace scl
