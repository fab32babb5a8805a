#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ewirp/rng.hpp"
#include "ewirp/tensor.hpp"

namespace ewirp {

constexpr int kImageBytes = 3 * 32 * 32;

struct Dataset {
  int num_classes = 0;
  std::vector<u8> pixels;   // n * 3072, CHW per record
  std::vector<u16> labels;  // fine labels
  std::vector<u8> coarse;   // cifar100 only

  i64 size() const { return static_cast<i64>(labels.size()); }
};

struct DatasetVariant {
  std::string name;
  int record_bytes;  // 3073 for cifar10, 3074 for cifar100
  int num_classes;
  int coarse_classes;  // 0 when absent
};

inline DatasetVariant dataset_variant(const std::string& name) {
  if (name == "cifar10") return {name, 1 + kImageBytes, 10, 0};
  if (name == "cifar100") return {name, 2 + kImageBytes, 100, 20};
  throw std::invalid_argument(cat("unknown dataset variant '", name, "'"));
}

namespace detail {

// Appends the records of one binary file, validating sizes and label ranges.
// Errors carry the byte offset of the violation.
inline void load_cifar_file(const std::string& path, const DatasetVariant& var, i64 expected_records,
                            Dataset& out) {
  std::ifstream f(path, std::ios::binary);
  require(f.good(), "cannot open dataset file ", path);
  f.seekg(0, std::ios::end);
  const i64 bytes = static_cast<i64>(f.tellg());
  f.seekg(0);
  require(bytes == expected_records * var.record_bytes, path, " holds ", bytes,
          " bytes but ", expected_records, " records of ", var.record_bytes,
          " bytes were expected (", expected_records * var.record_bytes,
          "); mismatch detected at byte offset ",
          std::min(bytes, expected_records * var.record_bytes));
  std::vector<u8> buf(static_cast<size_t>(bytes));
  f.read(reinterpret_cast<char*>(buf.data()), bytes);
  require(f.gcount() == bytes, "short read from ", path);
  for (i64 r = 0; r < expected_records; ++r) {
    const i64 off = r * var.record_bytes;
    if (var.coarse_classes > 0) {
      const u8 c = buf[off], fine = buf[off + 1];
      require(c < var.coarse_classes, path, ": coarse label ", int(c), " out of range at byte offset ",
              off);
      require(fine < var.num_classes, path, ": fine label ", int(fine),
              " out of range at byte offset ", off + 1);
      out.coarse.push_back(c);
      out.labels.push_back(fine);
      out.pixels.insert(out.pixels.end(), buf.begin() + off + 2, buf.begin() + off + 2 + kImageBytes);
    } else {
      const u8 lab = buf[off];
      require(lab < var.num_classes, path, ": label ", int(lab), " out of range at byte offset ", off);
      out.labels.push_back(lab);
      out.pixels.insert(out.pixels.end(), buf.begin() + off + 1, buf.begin() + off + 1 + kImageBytes);
    }
  }
}

}  // namespace detail

struct DataSplit {
  Dataset train, test;
};

// Loads the canonical binary distribution: cifar10 as data_batch_1..5.bin +
// test_batch.bin, cifar100 as train.bin + test.bin.
inline DataSplit load_cifar(const std::string& root, const std::string& variant_name) {
  const DatasetVariant var = dataset_variant(variant_name);
  DataSplit ds;
  ds.train.num_classes = ds.test.num_classes = var.num_classes;
  if (var.coarse_classes > 0) {
    detail::load_cifar_file(root + "/train.bin", var, 50000, ds.train);
    detail::load_cifar_file(root + "/test.bin", var, 10000, ds.test);
  } else {
    for (int i = 1; i <= 5; ++i)
      detail::load_cifar_file(root + "/data_batch_" + std::to_string(i) + ".bin", var, 10000,
                              ds.train);
    detail::load_cifar_file(root + "/test_batch.bin", var, 10000, ds.test);
  }
  require(ds.train.size() == 50000, "train split holds ", ds.train.size(), " records, expected 50000");
  require(ds.test.size() == 10000, "test split holds ", ds.test.size(), " records, expected 10000");
  return ds;
}

// Writes a synthetic corpus in the exact binary layout above. Classes are
// separable (class-keyed colors and oriented gratings plus noise) so training
// smoke tests have signal to learn from when the real corpus is absent.
inline void generate_synthetic_cifar(const std::string& root, const std::string& variant_name,
                                     u64 seed, i64 train_records = 50000, i64 test_records = 10000) {
  const DatasetVariant var = dataset_variant(variant_name);
  std::filesystem::create_directories(root);
  auto write_records = [&](const std::string& path, i64 count, u64 stream) {
    RngStream rng(seed, stream);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    require(f.good(), "cannot create ", path);
    std::vector<u8> rec(var.record_bytes);
    for (i64 r = 0; r < count; ++r) {
      const int label = static_cast<int>(rng.uniform_index(var.num_classes));
      int pos = 0;
      if (var.coarse_classes > 0) {
        rec[pos++] = static_cast<u8>(label % var.coarse_classes);
        rec[pos++] = static_cast<u8>(label);
      } else {
        rec[pos++] = static_cast<u8>(label);
      }
      const u64 key = splitmix64(0x5EEDC1A55ULL + label);
      const double base[3] = {60.0 + (key & 0x7F), 60.0 + ((key >> 8) & 0x7F),
                              60.0 + ((key >> 16) & 0x7F)};
      const double angle = (key >> 24 & 0xFF) / 255.0 * 3.14159265358979;
      const double freq = 0.2 + (key >> 32 & 0xFF) / 255.0 * 0.6;
      const double ca = std::cos(angle), sa = std::sin(angle);
      const double phase = rng.uniform(0.0, 6.283185);
      for (int ch = 0; ch < 3; ++ch)
        for (int y = 0; y < 32; ++y)
          for (int x = 0; x < 32; ++x) {
            const double wave = std::sin((ca * x + sa * y) * freq + phase + ch);
            double v = base[ch] + 50.0 * wave + rng.normal() * 18.0;
            if (v < 0) v = 0;
            if (v > 255) v = 255;
            rec[pos++] = static_cast<u8>(v + 0.5);
          }
      f.write(reinterpret_cast<const char*>(rec.data()), var.record_bytes);
    }
    require(f.good(), "write failure on ", path);
  };
  if (var.coarse_classes > 0) {
    write_records(root + "/train.bin", train_records, stream_tag("synthetic.train"));
    write_records(root + "/test.bin", test_records, stream_tag("synthetic.test"));
  } else {
    const i64 per = train_records / 5;
    require(per * 5 == train_records, "cifar10 train records must divide into 5 files");
    for (int i = 1; i <= 5; ++i)
      write_records(root + "/data_batch_" + std::to_string(i) + ".bin", per,
                    mix_streams(stream_tag("synthetic.train"), static_cast<u64>(i)));
    write_records(root + "/test_batch.bin", test_records, stream_tag("synthetic.test"));
  }
}

struct Normalization {
  double mean[3];
  double stddev[3];
};

inline Normalization default_normalization(const std::string& variant_name) {
  if (variant_name == "cifar10") return {{0.4914, 0.4822, 0.4465}, {0.2470, 0.2435, 0.2616}};
  if (variant_name == "cifar100") return {{0.5071, 0.4865, 0.4409}, {0.2673, 0.2564, 0.2762}};
  throw std::invalid_argument(cat("unknown dataset variant '", variant_name, "'"));
}

// Scale to [0,1], normalize per channel; train mode adds a 4-pixel-pad random
// crop and a coin-flip horizontal mirror, both drawn from `rng`.
inline void preprocess(const u8* pixels, const Normalization& norm, bool augment, RngStream* rng,
                       float* out) {
  int dy = 4, dx = 4;
  bool flip = false;
  if (augment) {
    require(rng != nullptr, "augmentation requires an rng stream");
    dy = static_cast<int>(rng->uniform_index(9));
    dx = static_cast<int>(rng->uniform_index(9));
    flip = rng->uniform() < 0.5;
  }
  for (int c = 0; c < 3; ++c) {
    const double inv = 1.0 / (255.0 * norm.stddev[c]);
    const double shift = norm.mean[c] / norm.stddev[c];
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) {
        const int sy = y + dy - 4;
        const int sx = (flip ? 31 - x : x) + dx - 4;
        double v = 0.0;  // zero padding outside the crop
        if (sy >= 0 && sy < 32 && sx >= 0 && sx < 32)
          v = pixels[(c * 32 + sy) * 32 + sx] * inv - shift;
        else
          v = -shift;  // a zero pixel, scaled and normalized
        out[(c * 32 + y) * 32 + x] = static_cast<float>(v);
      }
  }
}

struct Batch {
  Tensor<float> images;  // (n,3,32,32)
  std::vector<u16> labels;
};

// Deterministic epoch order: one permutation per (seed, epoch); every sample
// appears exactly once, final short batch kept.
inline std::vector<i64> epoch_permutation(i64 n, u64 seed, i64 epoch) {
  std::vector<i64> idx(n);
  for (i64 i = 0; i < n; ++i) idx[i] = i;
  RngStream rng(seed, mix_streams(stream_tag("epoch.permutation"), static_cast<u64>(epoch)));
  rng.shuffle(idx.begin(), idx.end());
  return idx;
}

inline Batch make_batch(const Dataset& ds, const std::vector<i64>& indices, i64 first, i64 count,
                        const Normalization& norm, bool augment, u64 seed, i64 epoch) {
  require(first >= 0 && count > 0 && first + count <= static_cast<i64>(indices.size()),
          "batch range [", first, ", ", first + count, ") out of bounds");
  Batch b;
  b.images = Tensor<float>({static_cast<int>(count), 3, 32, 32});
  b.labels.resize(count);
  for (i64 i = 0; i < count; ++i) {
    const i64 s = indices[first + i];
    b.labels[i] = ds.labels[s];
    RngStream rng(seed, mix_streams(stream_tag("augment"), static_cast<u64>(epoch),
                                    static_cast<u64>(s)));
    preprocess(ds.pixels.data() + s * kImageBytes, norm, augment, &rng,
               b.images.data() + i * kImageBytes);
  }
  return b;
}

}  // namespace ewirp
