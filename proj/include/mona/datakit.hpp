#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mona/rng.hpp"
#include "mona/tensor.hpp"

namespace mona {

using Image = Tensor<double>;  // [H,W], intensities in [0,1]
using LabelMap = Tensor<int>;  // [H,W], class indices, 0 = background

struct Sample2D {
  Image image;
  std::optional<LabelMap> label;
  std::string patient_id;
  int slice_index = 0;

  int height() const { return image.dim(0); }
  int width() const { return image.dim(1); }
  bool labeled() const { return label.has_value(); }
};

struct DatasetSplit {
  std::vector<Sample2D> labeled;
  std::vector<Sample2D> unlabeled;
  std::vector<Sample2D> val;
  std::vector<Sample2D> test;
  double label_ratio = 1.0;
};

enum class ShapeFamily { disks, rings, blobs };

inline std::string to_string(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::disks: return "disks";
    case ShapeFamily::rings: return "rings";
    case ShapeFamily::blobs: return "blobs";
  }
  return "disks";
}

inline ShapeFamily parse_shape_family(const std::string& s) {
  if (s == "disks") return ShapeFamily::disks;
  if (s == "rings") return ShapeFamily::rings;
  if (s == "blobs") return ShapeFamily::blobs;
  throw std::invalid_argument("unknown shape family '" + s + "' (expected disks|rings|blobs)");
}

/// Synthetic long-tail dataset description. Foreground class c (1-based)
/// receives an expected pixel share proportional to c^-exponent.
struct ZipfSpec {
  int foreground_classes = 3;
  double exponent = 1.0;
  int height = 64;
  int width = 64;
  int num_patients = 40;
  int slices_per_patient = 5;
  ShapeFamily shape_family = ShapeFamily::disks;
  std::uint64_t seed = 0;
  // Appearance knobs.
  double foreground_fraction = 0.2;  // expected foreground area / image area
  double noise_sigma = 0.08;
  double patient_gamma_spread = 0.6;  // log-gamma drawn uniformly in [-s, s]
  double bias_field = 0.25;           // amplitude of a per-slice linear ramp

  int num_classes() const { return foreground_classes + 1; }
};

/// Normalised Zipf weights c^-s over c = 1..C.
inline std::vector<double> zipf_shares(int foreground_classes, double exponent) {
  std::vector<double> w(foreground_classes);
  double total = 0;
  for (int c = 1; c <= foreground_classes; ++c) {
    w[c - 1] = std::pow(static_cast<double>(c), -exponent);
    total += w[c - 1];
  }
  for (auto& v : w) v /= total;
  return w;
}

/// Min-max normalisation to [0,1]. A constant image maps to zeros and
/// sets `*was_constant` (and logs a warning).
inline Image normalize_intensity(const Image& raw, bool* was_constant = nullptr) {
  if (raw.empty()) throw std::invalid_argument("normalize_intensity: empty image");
  const auto [lo, hi] = std::minmax_element(raw.values().begin(), raw.values().end());
  const double mn = *lo, mx = *hi;
  Image out(raw.shape());
  if (!(mx > mn)) {
    if (was_constant) *was_constant = true;
    std::clog << "warning: normalize_intensity: constant image mapped to zeros\n";
    return out;
  }
  if (was_constant) *was_constant = false;
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - mn) / (mx - mn);
  return out;
}

namespace detail {

struct Placed {
  double cy, cx, radius;
};

// Outer radius and membership test for one object whose expected lattice
// area (random sub-pixel centre) equals `area`.
struct ShapeDraw {
  ShapeFamily family;
  double r_outer;
  double r_inner = 0;      // rings
  double amp = 0, freq = 0, phase = 0;  // blobs

  bool contains(double dy, double dx) const {
    const double d = std::sqrt(dy * dy + dx * dx);
    switch (family) {
      case ShapeFamily::disks: return d <= r_outer;
      case ShapeFamily::rings: return d <= r_outer && d > r_inner;
      case ShapeFamily::blobs: {
        const double th = std::atan2(dy, dx);
        const double base = r_outer / (1.0 + amp);
        return d <= base * (1.0 + amp * std::sin(freq * th + phase));
      }
    }
    return false;
  }
};

inline ShapeDraw make_shape(ShapeFamily family, double area, Rng& rng) {
  ShapeDraw s{family, 0.0};
  switch (family) {
    case ShapeFamily::disks: s.r_outer = std::sqrt(area / M_PI); break;
    case ShapeFamily::rings: {
      // annulus with r_in = r_out / 2: area = 0.75 pi r_out^2
      s.r_outer = std::sqrt(area / (0.75 * M_PI));
      s.r_inner = 0.5 * s.r_outer;
      break;
    }
    case ShapeFamily::blobs: {
      s.amp = 0.25;
      s.freq = 3.0;
      s.phase = rng.uniform(0.0, 2.0 * M_PI);
      // area of r(th) = b (1 + a sin(k th)) is pi b^2 (1 + a^2 / 2)
      const double b = std::sqrt(area / (M_PI * (1.0 + 0.5 * s.amp * s.amp)));
      s.r_outer = b * (1.0 + s.amp);
      break;
    }
  }
  return s;
}

/// Brightness rank (1 = darkest foreground) per class index 1..C: class C
/// gets rank ceil(C/2), the remaining classes fill the other ranks from the
/// brightest down.
inline std::vector<int> brightness_ranks(int C) {
  std::vector<int> rank(C + 1, 0);
  const int mid = (C + 1) / 2;
  rank[C] = mid;
  int next = C;
  for (int c = 1; c < C; ++c) {
    if (next == mid) --next;
    rank[c] = next--;
  }
  return rank;
}

inline std::string patient_name(int p) {
  std::ostringstream os;
  os << 'P';
  os.width(3);
  os.fill('0');
  os << p;
  return os.str();
}

}  // namespace detail

/// Generates num_patients x slices_per_patient labelled slices. Objects never
/// overlap and never touch the border, so the expected pixel share of each
/// foreground class follows the Zipf law exactly.
inline std::vector<Sample2D> generate_synthetic(const ZipfSpec& spec) {
  if (spec.foreground_classes < 2) throw std::invalid_argument("generate_synthetic: need >= 2 foreground classes");
  if (spec.height <= 0 || spec.width <= 0 || spec.num_patients <= 0 || spec.slices_per_patient <= 0) {
    throw std::invalid_argument("generate_synthetic: sizes must be positive");
  }
  if (!(spec.exponent >= 0.0)) throw std::invalid_argument("generate_synthetic: exponent must be >= 0");
  if (!(spec.foreground_fraction > 0.0 && spec.foreground_fraction < 0.5)) {
    throw std::invalid_argument("generate_synthetic: foreground_fraction must be in (0, 0.5)");
  }

  const int C = spec.foreground_classes;
  const int H = spec.height, W = spec.width;
  const auto shares = zipf_shares(C, spec.exponent);
  Rng master(spec.seed);
  std::vector<Sample2D> out;
  out.reserve(static_cast<std::size_t>(spec.num_patients) * spec.slices_per_patient);

  for (int p = 0; p < spec.num_patients; ++p) {
    Rng prng = master.split();
    const double log_gamma = prng.uniform(-spec.patient_gamma_spread, spec.patient_gamma_spread);
    const double gamma = std::exp(log_gamma);
    // Class appearance: background darkest; the rarest class takes a middle
    // brightness rank so it borders two other classes in intensity.
    const auto rank = detail::brightness_ranks(C);
    std::vector<double> level(C + 1);
    level[0] = 0.15 + prng.uniform(-0.03, 0.03);
    for (int c = 1; c <= C; ++c) {
      level[c] = 0.3 + 0.55 * static_cast<double>(rank[c]) / C + prng.uniform(-0.04, 0.04);
    }

    for (int s = 0; s < spec.slices_per_patient; ++s) {
      Rng srng = prng.split();
      LabelMap label({H, W}, 0);
      // Rejection-sample a layout; a failed layout is redrawn from scratch.
      bool laid_out = false;
      for (int layout = 0; layout < 100 && !laid_out; ++layout) {
        label.fill(0);
        std::vector<detail::Placed> placed;
        laid_out = true;
        for (int c = 1; c <= C && laid_out; ++c) {
          const double area = spec.foreground_fraction * H * W * shares[c - 1] * srng.uniform(0.7, 1.3);
          const auto shape = detail::make_shape(spec.shape_family, area, srng);
          const double r = shape.r_outer;
          if (2.0 * r + 2.0 >= std::min(H, W)) {
            throw std::invalid_argument("generate_synthetic: object too large for image");
          }
          double cy = 0, cx = 0;
          bool ok = false;
          for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
            cy = srng.uniform(r + 1.0, H - r - 1.0);
            cx = srng.uniform(r + 1.0, W - r - 1.0);
            ok = std::all_of(placed.begin(), placed.end(), [&](const detail::Placed& q) {
              const double dy = q.cy - cy, dx = q.cx - cx;
              return std::sqrt(dy * dy + dx * dx) > q.radius + r + 1.0;
            });
          }
          if (!ok) {
            laid_out = false;
            break;
          }
          placed.push_back({cy, cx, r});
          const int y0 = std::max(0, static_cast<int>(cy - r) - 1), y1 = std::min(H - 1, static_cast<int>(cy + r) + 1);
          const int x0 = std::max(0, static_cast<int>(cx - r) - 1), x1 = std::min(W - 1, static_cast<int>(cx + r) + 1);
          for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x)
              if (shape.contains(y + 0.5 - cy, x + 0.5 - cx)) label.at(y, x) = c;
        }
      }
      if (!laid_out) throw std::runtime_error("generate_synthetic: could not place objects; lower foreground_fraction");

      const double gy = srng.uniform(-1.0, 1.0), gx = srng.uniform(-1.0, 1.0);
      Image raw({H, W});
      for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
          const double ramp = 1.0 + spec.bias_field * (gy * (y / (H - 1.0) - 0.5) + gx * (x / (W - 1.0) - 0.5));
          double v = level[label.at(y, x)] * ramp + spec.noise_sigma * srng.normal();
          v = std::clamp(v, 0.0, 1.0);
          raw.at(y, x) = std::pow(v, gamma);
        }
      Sample2D sample;
      sample.image = normalize_intensity(raw);
      sample.label = std::move(label);
      sample.patient_id = detail::patient_name(p);
      sample.slice_index = s;
      out.push_back(std::move(sample));
    }
  }
  return out;
}

/// Pixel counts per class over a labelled sample set.
inline std::map<int, long long> class_frequency(const std::vector<Sample2D>& samples) {
  std::map<int, long long> counts;
  for (const auto& s : samples) {
    if (!s.label) {
      throw std::invalid_argument("class_frequency: sample " + s.patient_id + "/" +
                                  std::to_string(s.slice_index) + " has no label");
    }
    for (int v : s.label->values()) ++counts[v];
  }
  return counts;
}

/// Patient-wise split. Label ratio, val and test fractions are all taken over
/// the number of distinct patients and rounded to the nearest whole patient.
inline DatasetSplit split_by_patient(const std::vector<Sample2D>& samples, double label_ratio,
                                     double val_frac, double test_frac, std::uint64_t seed) {
  if (!(label_ratio > 0.0 && label_ratio <= 1.0)) {
    throw std::invalid_argument("split_by_patient: label_ratio must be in (0, 1]");
  }
  if (val_frac < 0.0 || test_frac < 0.0 || val_frac + test_frac >= 1.0) {
    throw std::invalid_argument("split_by_patient: val_frac + test_frac must be in [0, 1)");
  }
  std::set<std::string> ids;
  for (const auto& s : samples) ids.insert(s.patient_id);
  std::vector<std::string> patients(ids.begin(), ids.end());
  const int P = static_cast<int>(patients.size());
  Rng rng(seed);
  rng.shuffle(patients);

  const int n_test = static_cast<int>(std::lround(test_frac * P));
  const int n_val = static_cast<int>(std::lround(val_frac * P));
  const int n_lab = static_cast<int>(std::lround(label_ratio * P));
  if (n_lab == 0) {
    throw std::invalid_argument("split_by_patient: label_ratio " + std::to_string(label_ratio) +
                                " selects zero of " + std::to_string(P) +
                                " patients; raise label_ratio to at least " +
                                std::to_string(0.5 / P));
  }
  if (n_lab > P - n_test - n_val) {
    throw std::invalid_argument("split_by_patient: not enough training patients for label_ratio");
  }
  std::map<std::string, int> role;  // 0 labeled, 1 unlabeled, 2 val, 3 test
  for (int i = 0; i < P; ++i) {
    int r;
    if (i < n_test) r = 3;
    else if (i < n_test + n_val) r = 2;
    else if (i < n_test + n_val + n_lab) r = 0;
    else r = 1;
    role[patients[i]] = r;
  }

  DatasetSplit split;
  split.label_ratio = label_ratio;
  for (const auto& s : samples) {
    switch (role[s.patient_id]) {
      case 0:
        if (!s.label) throw std::invalid_argument("split_by_patient: labeled patient slice without label");
        split.labeled.push_back(s);
        break;
      case 1: {
        Sample2D u = s;
        u.label.reset();
        split.unlabeled.push_back(std::move(u));
        break;
      }
      case 2: split.val.push_back(s); break;
      default: split.test.push_back(s); break;
    }
  }
  return split;
}

// ---------------------------------------------------------------------------
// Raster files: 4-line text header (magic, width, height, max value) then a
// little-endian row-major payload. R16 holds images, R8 holds labels.

namespace detail {

struct RasterHeader {
  std::string magic;
  int width = 0, height = 0, maxval = 0;
};

inline RasterHeader read_raster_header(std::istream& in, const std::string& path) {
  RasterHeader h;
  std::string line;
  auto next = [&](const char* what) {
    if (!std::getline(in, line)) throw std::runtime_error(path + ": truncated header (" + what + ")");
    return line;
  };
  h.magic = next("magic");
  if (h.magic != "R16" && h.magic != "R8") {
    throw std::runtime_error(path + ": unknown magic header '" + h.magic + "'");
  }
  try {
    h.width = std::stoi(next("width"));
    h.height = std::stoi(next("height"));
    h.maxval = std::stoi(next("max value"));
  } catch (const std::invalid_argument&) {
    throw std::runtime_error(path + ": malformed header");
  }
  if (h.width <= 0 || h.height <= 0 || h.maxval <= 0) throw std::runtime_error(path + ": bad dimensions");
  return h;
}

inline void write_raster_header(std::ostream& out, const char* magic, int w, int h, int maxval) {
  out << magic << '\n' << w << '\n' << h << '\n' << maxval << '\n';
}

}  // namespace detail

inline void save_image_r16(const Image& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  detail::write_raster_header(out, "R16", img.dim(1), img.dim(0), 65535);
  for (double v : img.values()) {
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
    const unsigned char b[2] = {static_cast<unsigned char>(q & 0xFF), static_cast<unsigned char>(q >> 8)};
    out.write(reinterpret_cast<const char*>(b), 2);
  }
}

inline void save_label_r8(const LabelMap& lab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  detail::write_raster_header(out, "R8", lab.dim(1), lab.dim(0), 255);
  for (int v : lab.values()) {
    if (v < 0 || v > 255) throw std::out_of_range("save_label_r8: label outside 0..255");
    const auto b = static_cast<char>(static_cast<unsigned char>(v));
    out.write(&b, 1);
  }
}

inline Image load_image_r16(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing image file " + path.string());
  const auto h = detail::read_raster_header(in, path.string());
  if (h.magic != "R16") throw std::runtime_error(path.string() + ": expected R16 raster, got " + h.magic);
  Image img({h.height, h.width});
  std::vector<unsigned char> buf(img.size() * 2);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw std::runtime_error(path.string() + ": truncated payload");
  }
  for (std::size_t i = 0; i < img.size(); ++i) {
    const unsigned q = buf[2 * i] | (static_cast<unsigned>(buf[2 * i + 1]) << 8);
    img[i] = static_cast<double>(q) / h.maxval;
  }
  return img;
}

inline LabelMap load_label_r8(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("missing label file " + path.string());
  const auto h = detail::read_raster_header(in, path.string());
  if (h.magic != "R8") throw std::runtime_error(path.string() + ": expected R8 raster, got " + h.magic);
  LabelMap lab({h.height, h.width});
  std::vector<unsigned char> buf(lab.size());
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()))) {
    throw std::runtime_error(path.string() + ": truncated payload");
  }
  for (std::size_t i = 0; i < lab.size(); ++i) lab[i] = buf[i];
  return lab;
}

/// Writes `index.tsv` plus one raster per image/label under `root`.
inline void save_dataset(const std::vector<Sample2D>& samples, const std::filesystem::path& root) {
  std::filesystem::create_directories(root);
  std::ofstream index(root / "index.tsv");
  if (!index) throw std::runtime_error("cannot write " + (root / "index.tsv").string());
  index << "patient_id\tslice_index\timage_file\tlabel_file\n";
  for (const auto& s : samples) {
    const std::string stem = s.patient_id + "_s" + std::to_string(s.slice_index);
    const std::string img_file = stem + ".r16";
    save_image_r16(s.image, root / img_file);
    std::string lab_file = "-";
    if (s.label) {
      lab_file = stem + ".r8";
      save_label_r8(*s.label, root / lab_file);
    }
    index << s.patient_id << '\t' << s.slice_index << '\t' << img_file << '\t' << lab_file << '\n';
  }
}

inline std::vector<Sample2D> load_dataset(const std::filesystem::path& root) {
  const auto index_path = root / "index.tsv";
  std::ifstream index(index_path);
  if (!index) throw std::runtime_error("missing dataset index " + index_path.string());
  std::string line;
  std::getline(index, line);  // header
  std::vector<Sample2D> out;
  std::set<std::pair<std::string, int>> seen;
  int line_no = 1;
  while (std::getline(index, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() != 4) {
      throw std::runtime_error(index_path.string() + ":" + std::to_string(line_no) + ": expected 4 columns");
    }
    Sample2D s;
    s.patient_id = cols[0];
    s.slice_index = std::stoi(cols[1]);
    if (!seen.insert({s.patient_id, s.slice_index}).second) {
      throw std::runtime_error(index_path.string() + ": duplicate slice " + cols[0] + "/" + cols[1]);
    }
    s.image = load_image_r16(root / cols[2]);
    if (cols[3] != "-") {
      auto lab = load_label_r8(root / cols[3]);
      if (lab.shape() != s.image.shape()) {
        throw std::runtime_error((root / cols[3]).string() + ": label shape " +
                                 LabelMap::shape_string(lab.shape()) + " does not match image " +
                                 Image::shape_string(s.image.shape()));
      }
      s.label = std::move(lab);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace mona
