#include "keysem/pgm.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace keysem {

namespace {

class PnmScanner {
 public:
  PnmScanner(const std::string& text, const std::string& name)
      : text_(text), name_(name) {}

  // Next whitespace-separated token, skipping '#' comments.
  std::string next_token() {
    for (;;) {
      skip_ws_();
      if (pos_ >= text_.size()) fail("unexpected end of file");
      if (text_[pos_] == '#') {
        while (pos_ < text_.size() && text_[pos_] != '\n') ++pos_;
        continue;
      }
      break;
    }
    const std::size_t start = pos_;
    while (pos_ < text_.size() && !std::isspace(static_cast<unsigned char>(text_[pos_])))
      ++pos_;
    return text_.substr(start, pos_ - start);
  }

  long next_int(const char* what) {
    const std::string tok = next_token();
    try {
      std::size_t used = 0;
      const long v = std::stol(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      return v;
    } catch (const std::exception&) {
      fail(std::string("expected integer for ") + what + ", got \"" + tok + "\"");
    }
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw std::runtime_error(name_ + ":" + std::to_string(line_) + ": " + msg);
  }

 private:
  void skip_ws_() {
    while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) {
      if (text_[pos_] == '\n') ++line_;
      ++pos_;
    }
  }

  const std::string& text_;
  std::string name_;
  std::size_t pos_ = 0;
  std::size_t line_ = 1;
};

}  // namespace

FeatureMap parse_pnm(const std::string& text, const std::string& name) {
  PnmScanner sc(text, name);
  const std::string magic = sc.next_token();
  std::size_t channels = 0;
  if (magic == "P2") {
    channels = 1;
  } else if (magic == "P3") {
    channels = 3;
  } else {
    sc.fail("unsupported magic \"" + magic + "\" (want P2 or P3)");
  }
  const long w = sc.next_int("width");
  const long h = sc.next_int("height");
  const long maxval = sc.next_int("maxval");
  if (w <= 0 || h <= 0) sc.fail("non-positive image dimensions");
  if (maxval <= 0 || maxval > 65535) sc.fail("maxval out of range");

  FeatureMap img(static_cast<std::size_t>(h), static_cast<std::size_t>(w), channels);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < channels; ++c) {
        const long v = sc.next_int("pixel value");
        if (v < 0 || v > maxval) sc.fail("pixel value out of range");
        img.at(y, x, c) = static_cast<double>(v) / static_cast<double>(maxval);
      }
    }
  }
  return img;
}

FeatureMap read_pnm(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("read_pnm: cannot open " + path);
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_pnm(buf.str(), path);
}

std::string format_pnm(const FeatureMap& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw std::invalid_argument("format_pnm: only 1 or 3 channels supported, got " +
                                std::to_string(img.channels));
  }
  std::ostringstream os;
  os << (img.channels == 1 ? "P2" : "P3") << '\n'
     << img.width << ' ' << img.height << '\n'
     << "255\n";
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      for (std::size_t c = 0; c < img.channels; ++c) {
        double v = img.at(y, x, c);
        if (v < 0.0) v = 0.0;
        if (v > 1.0) v = 1.0;
        const int q = static_cast<int>(std::lround(v * 255.0));
        if (x != 0 || c != 0) os << ' ';
        os << q;
      }
    }
    os << '\n';
  }
  return os.str();
}

void write_pnm(const std::string& path, const FeatureMap& img) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("write_pnm: cannot open " + path);
  os << format_pnm(img);
  if (!os) throw std::runtime_error("write_pnm: write failed for " + path);
}

}  // namespace keysem
