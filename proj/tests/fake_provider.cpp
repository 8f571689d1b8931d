// Test double for the external provider contract.
//
//   fake_provider [options] <stimuli.csv> <out.emb>     file mode
//   fake_provider --stream [options]                   stdio mode
//
// Options: --dim N, --constant (every vector is all ones), --drift-after K
// (dim changes to N/2 after K replies), --crash-after K (exit 1 after K
// replies), --skip ID (file mode: omit that id), --shuffle (file mode:
// reverse row order), --reorder (stdio: swap the first two replies).

#include <cstdio>
#include <cstring>
#include <iostream>
#include <string>
#include <vector>

#include "psyreid/embed.hpp"
#include "psyreid/image.hpp"

using namespace psyreid;

namespace {

struct Options {
  bool stream = false;
  std::size_t dim = 8;
  bool constant = false;
  long drift_after = -1;
  long crash_after = -1;
  std::string skip;
  bool shuffle = false;
  bool reorder = false;
  std::vector<std::string> positional;
};

std::vector<float> embed_image(const Image& img, std::size_t dim, bool constant) {
  std::vector<float> v(dim, 1.0f);
  if (constant) return v;
  double sum[3] = {0, 0, 0};
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) sum[c] += img.px(x, y)[c];
  const double n = static_cast<double>(img.width) * img.height;
  for (std::size_t d = 0; d < dim; ++d) v[d] = static_cast<float>(sum[d % 3] / n / 255.0 + 0.01 * static_cast<double>(d));
  return v;
}

bool read_exact(void* buf, std::size_t n) { return n == 0 || std::fread(buf, 1, n, stdin) == n; }

int run_stream(const Options& o) {
  long replies = 0;
  std::vector<std::string> held;  // for --reorder
  const auto emit = [](const std::string& frame) {
    std::fwrite(frame.data(), 1, frame.size(), stdout);
    std::fflush(stdout);
  };
  while (true) {
    std::uint32_t len = 0;
    if (!read_exact(&len, 4)) {
      std::fprintf(stderr, "fake_provider: truncated frame header\n");
      return 2;
    }
    if (len == 0) break;
    std::vector<std::uint8_t> payload(len);
    if (!read_exact(payload.data(), len)) {
      std::fprintf(stderr, "fake_provider: truncated frame\n");
      return 2;
    }
    std::uint16_t id_len;
    std::memcpy(&id_len, payload.data(), 2);
    const std::string id(reinterpret_cast<const char*>(payload.data()) + 2, id_len);
    std::uint32_t png_len;
    std::memcpy(&png_len, payload.data() + 2 + id_len, 4);
    const auto img = decode_image(std::span<const std::uint8_t>(payload.data() + 6 + id_len, png_len));
    if (o.crash_after >= 0 && replies >= o.crash_after) return 1;
    const std::size_t dim = (o.drift_after >= 0 && replies >= o.drift_after) ? o.dim / 2 : o.dim;
    const auto v = embed_image(img, dim, o.constant);
    std::string reply;
    const auto put = [&](const void* p, std::size_t n) { reply.append(static_cast<const char*>(p), n); };
    const std::uint32_t body = static_cast<std::uint32_t>(2 + id.size() + 4 + 4 * dim);
    const std::uint32_t d32 = static_cast<std::uint32_t>(dim);
    put(&body, 4);
    put(&id_len, 2);
    put(id.data(), id.size());
    put(&d32, 4);
    put(v.data(), 4 * dim);
    ++replies;
    if (o.reorder && replies <= 2) {
      held.push_back(reply);
      if (held.size() == 2) {
        emit(held[1]);
        emit(held[0]);
      }
      continue;
    }
    emit(reply);
  }
  if (held.size() == 1) emit(held[0]);
  return 0;
}

int run_file(const Options& o) {
  if (o.positional.size() != 2) {
    std::fprintf(stderr, "usage: fake_provider [options] <stimuli.csv> <out.emb>\n");
    return 2;
  }
  const auto sm = read_stimulus_manifest(o.positional[0]);
  std::vector<std::string> ids;
  std::vector<float> values;
  std::vector<const StimulusRow*> rows;
  for (const auto& r : sm.rows)
    if (r.ok() && r.image_id != o.skip) rows.push_back(&r);
  if (o.shuffle) std::reverse(rows.begin(), rows.end());
  for (const auto* r : rows) {
    if (o.crash_after >= 0 && static_cast<long>(ids.size()) >= o.crash_after) return 1;
    const auto v = embed_image(load_image(sm.resolve(*r)), o.dim, o.constant);
    ids.push_back(r->image_id);
    values.insert(values.end(), v.begin(), v.end());
  }
  write_embeddings(EmbeddingMatrix(o.dim, ids, values), o.positional[1]);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    const auto next = [&]() -> std::string {
      if (i + 1 >= argc) throw std::runtime_error("missing value for " + a);
      return argv[++i];
    };
    if (a == "--stream") o.stream = true;
    else if (a == "--dim") o.dim = std::stoul(next());
    else if (a == "--constant") o.constant = true;
    else if (a == "--drift-after") o.drift_after = std::stol(next());
    else if (a == "--crash-after") o.crash_after = std::stol(next());
    else if (a == "--skip") o.skip = next();
    else if (a == "--shuffle") o.shuffle = true;
    else if (a == "--reorder") o.reorder = true;
    else o.positional.push_back(a);
  }
  try {
    return o.stream ? run_stream(o) : run_file(o);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fake_provider: %s\n", e.what());
    return 2;
  }
}
