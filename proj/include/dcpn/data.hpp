#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <string>
#include <vector>

#include "dcpn/common.hpp"
#include "dcpn/rng.hpp"
#include "dcpn/tensor.hpp"

#include "json.hpp"

namespace dcpn {

namespace fs = std::filesystem;

enum class Split { train, test };

inline std::string to_string(Split s) {
  return s == Split::train ? "train" : "test";
}

struct DatasetSpec {
  std::string name;
  fs::path root;
  Split split = Split::train;
  std::vector<std::string> class_names;  // filled on load, sorted
};

// Image stored channel-major [3, H, W], values in [0, 1].
struct Sample {
  std::vector<double> image;
  int class_id = 0;
};

struct Dataset {
  std::string name;
  Split split = Split::train;
  int image_size = 0;
  std::vector<std::string> class_names;
  std::vector<Sample> samples;
  std::vector<std::vector<int>> by_class;  // sample indices per class

  int n_classes() const { return static_cast<int>(class_names.size()); }
};

struct EpisodeSpec {
  int n_way = 5;
  int k_shot = 1;
  int q_queries = 15;
};

// Labels are remapped to 0..n_way-1 by class draw order; original class ids
// never leave the sampler.
struct Episode {
  int n_way = 0, k_shot = 0, q_queries = 0;
  std::vector<int> support_idx, support_label;
  std::vector<int> query_idx, query_label;
};

enum class DomainKind { same, near, mixture };

inline std::string to_string(DomainKind k) {
  switch (k) {
    case DomainKind::same: return "same";
    case DomainKind::near: return "near";
    default: return "mixture";
  }
}

struct DomainTask {
  DomainKind kind = DomainKind::same;
  DatasetSpec base;
  DatasetSpec novel;
  int n_way = 5;
};

// ---------------------------------------------------------------------------
// loading
// ---------------------------------------------------------------------------

inline std::vector<double> decode_image(const cv::Mat& img, int image_size) {
  cv::Mat resized;
  if (img.cols == image_size && img.rows == image_size)
    resized = img;
  else
    cv::resize(img, resized, cv::Size(image_size, image_size), 0, 0,
               cv::INTER_AREA);
  std::vector<double> out(3 * std::size_t(image_size) * image_size);
  std::size_t plane = std::size_t(image_size) * image_size;
  for (int y = 0; y < image_size; ++y)
    for (int x = 0; x < image_size; ++x) {
      cv::Vec3b bgr = resized.at<cv::Vec3b>(y, x);
      std::size_t px = std::size_t(y) * image_size + x;
      out[0 * plane + px] = bgr[2] / 255.0;  // R
      out[1 * plane + px] = bgr[1] / 255.0;  // G
      out[2 * plane + px] = bgr[0] / 255.0;  // B
    }
  return out;
}

inline Dataset load_dataset(const DatasetSpec& spec, int image_size) {
  if (!fs::exists(spec.root))
    throw std::runtime_error("dataset root does not exist: " +
                             spec.root.string());
  Dataset ds;
  ds.name = spec.name;
  ds.split = spec.split;
  ds.image_size = image_size;
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(spec.root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty())
    throw std::runtime_error("dataset has no class directories: " +
                             spec.root.string());
  for (const auto& dir : class_dirs) {
    int class_id = ds.n_classes();
    ds.class_names.push_back(dir.filename().string());
    ds.by_class.emplace_back();
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      auto ext = e.path().extension().string();
      if (ext == ".png" || ext == ".jpg" || ext == ".jpeg")
        files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      cv::Mat img = cv::imread(f.string(), cv::IMREAD_COLOR);
      if (img.empty()) {
        std::cerr << "warning: skipping unreadable image " << f << "\n";
        continue;
      }
      ds.by_class[class_id].push_back(static_cast<int>(ds.samples.size()));
      ds.samples.push_back({decode_image(img, image_size), class_id});
    }
    if (ds.by_class[class_id].empty())
      throw std::runtime_error("class '" + ds.class_names.back() +
                               "' contains no readable images");
  }
  return ds;
}

// ---------------------------------------------------------------------------
// synthetic corpus
// ---------------------------------------------------------------------------

struct SyntheticClassParams {
  double hue;        // base color, degrees
  double frequency;  // grating cycles per image
};

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g,
                       double& b) {
  double c = v * s;
  double hp = h / 60.0;
  double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
  double m = v - c;
  double rr = 0, gg = 0, bb = 0;
  if (hp < 1)      { rr = c; gg = x; }
  else if (hp < 2) { rr = x; gg = c; }
  else if (hp < 3) { gg = c; bb = x; }
  else if (hp < 4) { gg = x; bb = c; }
  else if (hp < 5) { rr = x; bb = c; }
  else             { rr = c; bb = x; }
  r = rr + m; g = gg + m; b = bb + m;
}

inline SyntheticClassParams synthetic_class_params(int class_id,
                                                  int n_classes) {
  return {360.0 * class_id / n_classes, 1.5 + 1.0 * class_id};
}

// Each class is a distinct texture family: a class-specific base color plus a
// class-specific-frequency grating at random orientation and phase. Classes
// are separable by raw-pixel means, which the tests verify with a
// nearest-centroid oracle.
inline Dataset generate_synthetic_corpus(int n_classes, int per_class,
                                         int image_size,
                                         std::uint64_t seed) {
  if (n_classes < 2 || per_class < 2)
    throw std::invalid_argument("synthetic corpus needs >=2 classes and >=2 "
                                "samples per class");
  Dataset ds;
  ds.name = "synthetic";
  ds.image_size = image_size;
  std::size_t plane = std::size_t(image_size) * image_size;
  for (int c = 0; c < n_classes; ++c) {
    ds.class_names.push_back("class_" + std::string(c < 10 ? "0" : "") +
                             std::to_string(c));
    ds.by_class.emplace_back();
    auto params = synthetic_class_params(c, n_classes);
    double br, bg, bb;
    hsv_to_rgb(params.hue, 0.55, 0.65, br, bg, bb);
    Rng rng(seed, 1000 + c);
    for (int i = 0; i < per_class; ++i) {
      double theta = rng.uniform(0.0, std::numbers::pi);
      double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      double ct = std::cos(theta), st = std::sin(theta);
      Sample s;
      s.class_id = c;
      s.image.resize(3 * plane);
      for (int y = 0; y < image_size; ++y)
        for (int x = 0; x < image_size; ++x) {
          double u = (x * ct + y * st) / image_size;
          double wave =
              0.18 * std::sin(2.0 * std::numbers::pi * params.frequency * u +
                              phase);
          double noise = 0.04 * rng.normal();
          std::size_t px = std::size_t(y) * image_size + x;
          s.image[0 * plane + px] = std::clamp(br + wave + noise, 0.0, 1.0);
          s.image[1 * plane + px] = std::clamp(bg + wave + noise, 0.0, 1.0);
          s.image[2 * plane + px] = std::clamp(bb + wave + noise, 0.0, 1.0);
        }
      ds.by_class[c].push_back(static_cast<int>(ds.samples.size()));
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

inline std::uint64_t corpus_checksum(const Dataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& s : ds.samples) h = fnv1a64(s.image, h);
  return h;
}

// Writes the corpus in the class-per-subdirectory layout plus manifest.json.
inline void write_corpus(const Dataset& ds, const fs::path& dir,
                         std::uint64_t seed) {
  fs::create_directories(dir);
  std::size_t plane = std::size_t(ds.image_size) * ds.image_size;
  for (int c = 0; c < ds.n_classes(); ++c) {
    fs::path cls_dir = dir / ds.class_names[c];
    fs::create_directories(cls_dir);
    int k = 0;
    for (int idx : ds.by_class[c]) {
      const auto& img = ds.samples[idx].image;
      cv::Mat m(ds.image_size, ds.image_size, CV_8UC3);
      for (int y = 0; y < ds.image_size; ++y)
        for (int x = 0; x < ds.image_size; ++x) {
          std::size_t px = std::size_t(y) * ds.image_size + x;
          auto q = [&](double v) {
            return cv::saturate_cast<uchar>(std::lround(v * 255.0));
          };
          m.at<cv::Vec3b>(y, x) = {q(img[2 * plane + px]),
                                   q(img[1 * plane + px]),
                                   q(img[0 * plane + px])};
        }
      char name[32];
      std::snprintf(name, sizeof(name), "img_%04d.png", k++);
      cv::imwrite((cls_dir / name).string(), m);
    }
  }
  nlohmann::json manifest;
  manifest["seed"] = seed;
  manifest["n_classes"] = ds.n_classes();
  manifest["per_class"] = static_cast<int>(ds.by_class[0].size());
  manifest["image_size"] = ds.image_size;
  manifest["checksum"] = hex64(corpus_checksum(ds));
  for (int c = 0; c < ds.n_classes(); ++c) {
    auto p = synthetic_class_params(c, ds.n_classes());
    manifest["classes"].push_back({{"name", ds.class_names[c]},
                                   {"hue", p.hue},
                                   {"frequency", p.frequency}});
  }
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// episodic sampling
// ---------------------------------------------------------------------------

inline Episode sample_episode(const Dataset& ds, const EpisodeSpec& spec,
                              Rng& rng) {
  if (spec.n_way < 2 || spec.k_shot < 1 || spec.q_queries < 1)
    throw std::invalid_argument("episode spec requires n_way>=2, k_shot>=1, "
                                "q_queries>=1");
  if (ds.n_classes() < spec.n_way)
    throw std::runtime_error(
        "dataset has " + std::to_string(ds.n_classes()) +
        " classes, episode needs " + std::to_string(spec.n_way));
  std::vector<int> classes =
      rng.sample_without_replacement(ds.n_classes(), spec.n_way);
  Episode ep;
  ep.n_way = spec.n_way;
  ep.k_shot = spec.k_shot;
  ep.q_queries = spec.q_queries;
  int need = spec.k_shot + spec.q_queries;
  for (int label = 0; label < spec.n_way; ++label) {
    const auto& pool = ds.by_class[classes[label]];
    if (static_cast<int>(pool.size()) < need)
      throw std::runtime_error(
          "class '" + ds.class_names[classes[label]] + "' has " +
          std::to_string(pool.size()) + " samples, episode needs " +
          std::to_string(need));
    std::vector<int> pick =
        rng.sample_without_replacement(static_cast<int>(pool.size()), need);
    for (int i = 0; i < spec.k_shot; ++i) {
      ep.support_idx.push_back(pool[pick[i]]);
      ep.support_label.push_back(label);
    }
    for (int i = spec.k_shot; i < need; ++i) {
      ep.query_idx.push_back(pool[pick[i]]);
      ep.query_label.push_back(label);
    }
  }
  return ep;
}

// Stacks dataset samples into a [B, 3, H, W] tensor.
inline Tensor images_to_tensor(const Dataset& ds,
                               const std::vector<int>& indices) {
  int B = static_cast<int>(indices.size());
  int S = ds.image_size;
  std::vector<double> v;
  v.reserve(std::size_t(B) * 3 * S * S);
  for (int idx : indices) {
    const auto& img = ds.samples[idx].image;
    v.insert(v.end(), img.begin(), img.end());
  }
  return Tensor::from_data({B, 3, S, S}, std::move(v));
}

// ---------------------------------------------------------------------------
// domain tasks
// ---------------------------------------------------------------------------

inline DomainTask make_domain_task(DomainKind kind, const DatasetSpec& base,
                                   const DatasetSpec& novel,
                                   int n_way_override = 0) {
  if (kind == DomainKind::same && base.name != novel.name)
    throw std::runtime_error("same-domain task requires base and novel from "
                             "the same dataset, got '" +
                             base.name + "' vs '" + novel.name + "'");
  DomainTask t;
  t.kind = kind;
  t.base = base;
  t.novel = novel;
  t.n_way = n_way_override > 0 ? n_way_override
                               : (kind == DomainKind::same ? 7 : 5);
  return t;
}

// Euclidean distance between the unit-normalized mean feature vectors of two
// feature banks.
inline double dataset_distance(const std::vector<std::vector<double>>& a,
                               const std::vector<std::vector<double>>& b) {
  if (a.empty() || b.empty())
    throw std::invalid_argument("dataset_distance: empty feature set");
  size_t d = a[0].size();
  auto mean_unit = [d](const std::vector<std::vector<double>>& f) {
    std::vector<double> m(d, 0.0);
    for (const auto& row : f) {
      if (row.size() != d)
        throw std::invalid_argument("dataset_distance: dimension mismatch");
      for (size_t i = 0; i < d; ++i) m[i] += row[i];
    }
    double norm = 0.0;
    for (auto& v : m) {
      v /= double(f.size());
      norm += v * v;
    }
    norm = std::sqrt(norm);
    if (norm > 0.0)
      for (auto& v : m) v /= norm;
    return m;
  };
  std::vector<double> ma = mean_unit(a), mb = mean_unit(b);
  double s = 0.0;
  for (size_t i = 0; i < d; ++i) s += (ma[i] - mb[i]) * (ma[i] - mb[i]);
  return std::sqrt(s);
}

}  // namespace dcpn
