#include "plunet/data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <set>
#include <stdexcept>

#include "plunet/rng.hpp"

namespace plunet::data {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error(msg); }

struct Ellipse {
  double cy, cx, a, b, theta;
};

bool inside(const Ellipse& e, double y, double x) {
  const double dy = y - e.cy;
  const double dx = x - e.cx;
  const double c = std::cos(e.theta);
  const double s = std::sin(e.theta);
  const double u = (dx * c + dy * s) / e.a;
  const double v = (-dx * s + dy * c) / e.b;
  return u * u + v * v <= 1.0;
}

// Normalized radius in [0, 1] inside the ellipse.
double radius(const Ellipse& e, double y, double x) {
  const double dy = y - e.cy;
  const double dx = x - e.cx;
  const double c = std::cos(e.theta);
  const double s = std::sin(e.theta);
  const double u = (dx * c + dy * s) / e.a;
  const double v = (-dx * s + dy * c) / e.b;
  return std::sqrt(u * u + v * v);
}

std::uint8_t to_byte(float v) {
  const double c = std::clamp(static_cast<double>(v), 0.0, 1.0);
  return static_cast<std::uint8_t>(std::lround(c * 255.0));
}

struct Netpbm {
  std::string magic;
  std::int64_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

// Header tokens are separated by whitespace; '#' starts a comment. Exactly
// one whitespace byte follows maxval.
Netpbm read_netpbm(const fs::path& path, const char* expected_magic, std::int64_t channels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    int ch;
    while ((ch = is.get()) != EOF) {
      if (ch == '#') {
        while ((ch = is.get()) != EOF && ch != '\n') {
        }
        continue;
      }
      if (std::isspace(ch)) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(static_cast<char>(ch));
    }
    return t;
  };
  Netpbm img;
  img.magic = token();
  if (img.magic != expected_magic) {
    fail(path.string() + ": expected " + expected_magic + " header, found '" + img.magic + "'");
  }
  try {
    img.width = std::stoll(token());
    img.height = std::stoll(token());
    const auto maxval = std::stoll(token());
    if (maxval != 255) fail(path.string() + ": maxval must be 255, got " + std::to_string(maxval));
  } catch (const std::logic_error&) {
    fail(path.string() + ": malformed header");
  }
  if (img.width < 1 || img.height < 1) fail(path.string() + ": malformed header (non-positive size)");
  const auto count = static_cast<std::size_t>(img.width * img.height * channels);
  img.pixels.resize(count);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(is.gcount()) != count) fail(path.string() + ": truncated pixel data");
  return img;
}

void write_netpbm(const fs::path& path, const char* magic, std::int64_t width, std::int64_t height,
                  const std::vector<std::uint8_t>& pixels) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail("cannot write " + path.string());
  os << magic << '\n' << width << ' ' << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!os) fail("failed writing " + path.string());
}

}  // namespace

void Sample::validate() const {
  const Shape& is = image.shape();
  const Shape& ms = mask.shape();
  if (is.n != 1 || ms.n != 1 || ms.c != 1) fail("sample '" + id + "' must hold one image and one mask channel");
  if (is.h != ms.h || is.w != ms.w) {
    fail("sample '" + id + "': image " + std::to_string(is.h) + "x" + std::to_string(is.w) + " vs mask " +
         std::to_string(ms.h) + "x" + std::to_string(ms.w));
  }
  for (float v : mask.data()) {
    if (v != 0.0f && v != 1.0f) fail("sample '" + id + "': mask is not binary");
  }
}

std::vector<Sample> synth_generate(std::int64_t count, std::int64_t height, std::int64_t width,
                                   std::uint64_t seed, const SynthOptions& opt) {
  if (count < 0) throw std::invalid_argument("sample count must be non-negative");
  if (height < 32 || width < 32) throw std::invalid_argument("synthetic images need H, W >= 32");
  if (opt.channels < 1) throw std::invalid_argument("channel count must be positive");
  const double side = static_cast<double>(std::min(height, width));
  const double plane = static_cast<double>(height * width);

  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(i)));
    std::vector<Ellipse> shapes;
    Tensor<float> mask(Shape{1, 1, height, width});
    for (int attempt = 0;; ++attempt) {
      if (attempt == 1000) fail("could not place ellipses within the foreground bounds");
      shapes.clear();
      const auto k = 1 + rng.index(3);
      for (std::uint64_t e = 0; e < k; ++e) {
        shapes.push_back({rng.uniform(0.0, static_cast<double>(height)), rng.uniform(0.0, static_cast<double>(width)),
                          rng.uniform(side / 8, side / 3), rng.uniform(side / 8, side / 3),
                          rng.uniform(0.0, std::numbers::pi)});
      }
      std::int64_t fg = 0;
      for (std::int64_t y = 0; y < height; ++y) {
        for (std::int64_t x = 0; x < width; ++x) {
          bool in = false;
          for (const auto& e : shapes) in = in || inside(e, y + 0.5, x + 0.5);
          mask.at(0, 0, y, x) = in ? 1.0f : 0.0f;
          fg += in;
        }
      }
      const double frac = static_cast<double>(fg) / plane;
      if (frac >= opt.min_foreground && frac <= opt.max_foreground) break;
    }

    std::vector<double> bg(opt.channels), fg(opt.channels);
    for (std::int64_t c = 0; c < opt.channels; ++c) {
      bg[c] = rng.uniform(0.10, 0.35);
      fg[c] = rng.uniform(0.60, 0.90);
    }
    Tensor<float> image(Shape{1, opt.channels, height, width});
    for (std::int64_t y = 0; y < height; ++y) {
      for (std::int64_t x = 0; x < width; ++x) {
        double r = 2.0;
        for (const auto& e : shapes) r = std::min(r, radius(e, y + 0.5, x + 0.5));
        const bool in = mask.at(0, 0, y, x) != 0.0f;
        for (std::int64_t c = 0; c < opt.channels; ++c) {
          // Brightest at the ellipse center, fading by 30% toward the rim.
          const double base = in ? fg[c] * (1.0 - 0.3 * std::min(r, 1.0)) : bg[c];
          const double v = base + opt.noise_sigma * rng.normal();
          image.at(0, c, y, x) = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
      }
    }
    char id[32];
    std::snprintf(id, sizeof id, "synth_%05lld", static_cast<long long>(i));
    out.push_back({id, std::move(image), std::move(mask)});
  }
  return out;
}

void write_ppm(const fs::path& path, const Tensor<float>& image) {
  const Shape& s = image.shape();
  if (s.n != 1 || s.c != 3) fail("PPM output needs a (1,3,H,W) image, got " + s.str());
  std::vector<std::uint8_t> px(static_cast<std::size_t>(s.numel()));
  std::size_t k = 0;
  for (std::int64_t y = 0; y < s.h; ++y) {
    for (std::int64_t x = 0; x < s.w; ++x) {
      for (std::int64_t c = 0; c < 3; ++c) px[k++] = to_byte(image.at(0, c, y, x));
    }
  }
  write_netpbm(path, "P6", s.w, s.h, px);
}

Tensor<float> read_ppm(const fs::path& path) {
  const auto img = read_netpbm(path, "P6", 3);
  Tensor<float> t(Shape{1, 3, img.height, img.width});
  std::size_t k = 0;
  for (std::int64_t y = 0; y < img.height; ++y) {
    for (std::int64_t x = 0; x < img.width; ++x) {
      for (std::int64_t c = 0; c < 3; ++c) t.at(0, c, y, x) = static_cast<float>(img.pixels[k++]) / 255.0f;
    }
  }
  return t;
}

void write_pgm_mask(const fs::path& path, const Tensor<float>& mask) {
  const Shape& s = mask.shape();
  if (s.n != 1 || s.c != 1) fail("PGM mask output needs a (1,1,H,W) tensor, got " + s.str());
  std::vector<std::uint8_t> px(static_cast<std::size_t>(s.numel()));
  const auto d = mask.data();
  for (std::size_t i = 0; i < px.size(); ++i) {
    if (d[i] != 0.0f && d[i] != 1.0f) fail("mask written to " + path.string() + " is not binary");
    px[i] = d[i] != 0.0f ? 255 : 0;
  }
  write_netpbm(path, "P5", s.w, s.h, px);
}

Tensor<float> read_pgm_mask(const fs::path& path) {
  const auto img = read_netpbm(path, "P5", 1);
  Tensor<float> t(Shape{1, 1, img.height, img.width});
  auto d = t.data();
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    const auto v = img.pixels[i];
    if (v != 0 && v != 255) {
      fail(path.string() + ": mask pixel value " + std::to_string(v) + " is neither 0 nor 255");
    }
    d[i] = v >= 128 ? 1.0f : 0.0f;
  }
  return t;
}

void save_sample(const Sample& sample, const fs::path& dir) {
  sample.validate();
  fs::create_directories(dir);
  write_ppm(dir / (sample.id + ".ppm"), sample.image);
  write_pgm_mask(dir / (sample.id + "_mask.pgm"), sample.mask);
}

std::vector<Sample> load_dir(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail("dataset directory " + dir.string() + " does not exist");
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") ids.push_back(entry.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  std::vector<Sample> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const fs::path mask_path = dir / (id + "_mask.pgm");
    if (!fs::exists(mask_path)) fail("image " + id + ".ppm has no mask " + mask_path.filename().string());
    Sample s{id, read_ppm(dir / (id + ".ppm")), read_pgm_mask(mask_path)};
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

Split split(const std::vector<Sample>& samples, const SplitSpec& spec) {
  const std::size_t n = samples.size();
  if (n < 5) throw std::invalid_argument("splitting needs at least 5 samples, got " + std::to_string(n));
  if (spec.train < 0 || spec.val < 0 || spec.test < 0 ||
      std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9) {
    throw std::invalid_argument("split fractions must be non-negative and sum to 1");
  }
  std::set<std::string> ids;
  for (const auto& s : samples) {
    if (!ids.insert(s.id).second) throw std::invalid_argument("duplicate sample id '" + s.id + "'");
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(spec.seed);
  for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);

  const double dn = static_cast<double>(n);
  const auto cut1 = static_cast<std::size_t>(std::floor(spec.train * dn + 1e-9));
  const auto cut2 = static_cast<std::size_t>(std::floor((spec.train + spec.val) * dn + 1e-9));
  Split out;
  for (std::size_t k = 0; k < n; ++k) {
    auto& dst = k < cut1 ? out.train : (k < cut2 ? out.val : out.test);
    dst.push_back(samples[order[k]]);
  }
  return out;
}

namespace {

Tensor<float> gather(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices, bool masks) {
  if (indices.empty()) throw std::invalid_argument("cannot build an empty batch");
  std::vector<Tensor<float>> items;
  items.reserve(indices.size());
  for (auto i : indices) items.push_back(masks ? samples.at(i).mask : samples.at(i).image);
  return stack_batch<float>(items);
}

}  // namespace

Tensor<float> batch_images(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  return gather(samples, indices, false);
}

Tensor<float> batch_masks(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  return gather(samples, indices, true);
}

}  // namespace plunet::data
