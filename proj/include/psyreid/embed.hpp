#pragma once

// Embedding matrices, the EMB1 binary format, the external provider contract
// (file mode and framed stdio streaming), and a synthetic provider.

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "psyreid/core.hpp"
#include "psyreid/dataset.hpp"
#include "psyreid/image.hpp"
#include "psyreid/perturb.hpp"

extern char** environ;

namespace psyreid {

static_assert(std::endian::native == std::endian::little, "EMB1 I/O assumes a little-endian host");

/// Immutable n x dim float matrix keyed by image id.
class EmbeddingMatrix {
 public:
  EmbeddingMatrix() = default;

  EmbeddingMatrix(std::size_t dim, std::vector<std::string> ids, std::vector<float> values)
      : dim_(dim), ids_(std::move(ids)), values_(std::move(values)) {
    if (dim_ == 0 && !ids_.empty()) throw IntegrityError("embedding dim must be positive");
    if (values_.size() != ids_.size() * dim_)
      throw IntegrityError("embedding value count " + std::to_string(values_.size()) + " != n*dim");
    index_.reserve(ids_.size());
    for (std::size_t i = 0; i < ids_.size(); ++i) {
      if (!index_.emplace(ids_[i], i).second) throw IntegrityError("duplicate embedding id '" + ids_[i] + "'");
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (!std::isfinite(values_[i]))
        throw IntegrityError("non-finite embedding value for id '" + ids_[i / dim_] + "'");
    }
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return ids_.size(); }
  bool empty() const noexcept { return ids_.empty(); }
  const std::vector<std::string>& ids() const noexcept { return ids_; }
  std::span<const float> values() const noexcept { return values_; }

  std::span<const float> row(std::size_t i) const noexcept { return {values_.data() + i * dim_, dim_}; }

  std::optional<std::size_t> find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::span<const float> at(std::string_view id) const {
    auto i = find(id);
    if (!i) throw IntegrityError("no embedding for id '" + std::string(id) + "'");
    return row(*i);
  }

  friend bool operator==(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
    return a.dim_ == b.dim_ && a.ids_ == b.ids_ && a.values_.size() == b.values_.size() &&
           std::memcmp(a.values_.data(), b.values_.data(), a.values_.size() * sizeof(float)) == 0;
  }

 private:
  std::size_t dim_ = 0;
  std::vector<std::string> ids_;
  std::vector<float> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// EMB1
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void put_le(std::string& out, T v) {
  std::array<char, sizeof(T)> b;
  std::memcpy(b.data(), &v, sizeof(T));
  out.append(b.data(), b.size());
}

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    std::string_view s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_));
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
  std::string what_;
};

}  // namespace detail

inline std::string encode_emb1(const EmbeddingMatrix& m) {
  std::string out;
  out.reserve(16 + m.size() * (2 + 16 + m.dim() * 4));
  out.append("EMB1", 4);
  detail::put_le<std::uint32_t>(out, 1);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.size()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.dim()));
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& id = m.ids()[i];
    if (id.size() > 0xFFFF) throw FormatError("embedding id longer than 65535 bytes");
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(id.size()));
    out.append(id);
    const auto r = m.row(i);
    out.append(reinterpret_cast<const char*>(r.data()), r.size() * sizeof(float));
  }
  return out;
}

inline EmbeddingMatrix decode_emb1(std::span<const std::uint8_t> bytes, const std::string& what = "EMB1") {
  detail::ByteReader rd(bytes, what);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "EMB1", 4) != 0) throw FormatError(what + ": bad magic");
  rd.take(4);
  const auto version = rd.get<std::uint32_t>();
  if (version != 1) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto n = rd.get<std::uint32_t>();
  const auto dim = rd.get<std::uint32_t>();
  if (n > 0 && dim == 0) throw FormatError(what + ": dim must be positive");
  // Each record needs at least 2 + 4*dim bytes; reject impossible counts before allocating.
  if (static_cast<std::uint64_t>(n) * (2 + 4ULL * dim) > rd.remaining())
    throw FormatError(what + ": truncated (header declares " + std::to_string(n) + " records)");
  std::vector<std::string> ids;
  std::vector<float> values;
  ids.reserve(n);
  values.resize(static_cast<std::size_t>(n) * dim);
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto len = rd.get<std::uint16_t>();
    ids.emplace_back(rd.take(len));
    const auto raw = rd.take(static_cast<std::size_t>(dim) * 4);
    std::memcpy(values.data() + static_cast<std::size_t>(i) * dim, raw.data(), raw.size());
  }
  if (rd.remaining() != 0) throw FormatError(what + ": " + std::to_string(rd.remaining()) + " trailing bytes");
  return EmbeddingMatrix(dim, std::move(ids), std::move(values));
}

inline void write_embeddings(const EmbeddingMatrix& m, const fs::path& path) { write_file_atomic(path, encode_emb1(m)); }

inline EmbeddingMatrix read_embeddings(const fs::path& path) {
  const auto bytes = read_bytes(path);
  return decode_emb1(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Synthetic provider
// ---------------------------------------------------------------------------

/// Seeded unit anchor vector for one identity.
inline std::vector<double> identity_anchor(std::int64_t person_id, std::size_t dim, std::uint64_t seed) {
  Rng rng(mix64(seed, 0x616e63686f72ULL, static_cast<std::uint64_t>(person_id)));
  std::vector<double> a(dim);
  double norm = 0.0;
  do {
    norm = 0.0;
    for (auto& v : a) {
      v = rng.normal();
      norm += v * v;
    }
  } while (norm == 0.0);
  norm = std::sqrt(norm);
  for (auto& v : a) v /= norm;
  return a;
}

/// Each image of identity k maps to normalize(a_k + noise_scale * z) with z a
/// seeded standard normal draw keyed by image id.
inline EmbeddingMatrix synthetic_embeddings(const Manifest& manifest, double noise_scale, std::size_t dim,
                                            std::uint64_t seed) {
  if (dim < 2) throw ParameterError("synthetic embeddings need dim >= 2");
  if (!(noise_scale >= 0) || !std::isfinite(noise_scale)) throw ParameterError("noise_scale must be finite and >= 0");
  std::unordered_map<std::int64_t, std::vector<double>> anchors;
  std::vector<std::string> ids;
  std::vector<float> values;
  ids.reserve(manifest.size());
  values.reserve(manifest.size() * dim);
  std::vector<double> v(dim);
  for (const auto& r : manifest.records) {
    auto it = anchors.find(r.person_id);
    if (it == anchors.end()) it = anchors.emplace(r.person_id, identity_anchor(r.person_id, dim, seed)).first;
    const auto& a = it->second;
    if (noise_scale == 0.0) {
      v = a;
    } else {
      Rng rng(mix64(seed, 0x6e6f697365ULL, fnv1a(r.image_id)));
      double norm = 0.0;
      for (std::size_t d = 0; d < dim; ++d) {
        v[d] = a[d] + noise_scale * rng.normal();
        norm += v[d] * v[d];
      }
      norm = std::sqrt(norm);
      if (norm > 0)
        for (auto& x : v) x /= norm;
      else
        v = a;
    }
    ids.push_back(r.image_id);
    for (double x : v) values.push_back(static_cast<float>(x));
  }
  return EmbeddingMatrix(dim, std::move(ids), std::move(values));
}

// ---------------------------------------------------------------------------
// External providers
// ---------------------------------------------------------------------------

enum class ProviderMode { file, subprocess };

struct ProviderConfig {
  ProviderMode mode = ProviderMode::file;
  std::vector<std::string> command;
  std::size_t batch_size = 16;
  double timeout_s = 600.0;
  fs::path work_dir;  // file mode scratch space; defaults to the system temp dir

  void validate() const {
    if (command.empty()) throw ConfigError("provider command must not be empty");
    if (batch_size == 0) throw ConfigError("provider batch_size must be positive");
    if (!(timeout_s > 0)) throw ConfigError("provider timeout must be positive");
  }
};

struct ProviderError : Error {
  ProviderError(const std::string& msg, EmbeddingMatrix done) : Error(msg), completed(std::move(done)) {}
  EmbeddingMatrix completed;  // rows received before the failure
};

struct ProviderResult {
  EmbeddingMatrix embeddings;        // one row per successful stimulus, manifest order
  std::vector<std::string> missing;  // ok stimuli the provider returned nothing for
};

namespace detail {

class ChildProcess {
 public:
  ChildProcess(const std::vector<std::string>& argv, bool pipe_stdio) {
    std::vector<char*> args;
    for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);
    posix_spawn_file_actions_t fa;
    posix_spawn_file_actions_init(&fa);
    int in_pipe[2] = {-1, -1}, out_pipe[2] = {-1, -1};
    if (pipe_stdio) {
      if (pipe(in_pipe) != 0 || pipe(out_pipe) != 0) throw Error("pipe() failed");
      posix_spawn_file_actions_adddup2(&fa, in_pipe[0], STDIN_FILENO);
      posix_spawn_file_actions_adddup2(&fa, out_pipe[1], STDOUT_FILENO);
      posix_spawn_file_actions_addclose(&fa, in_pipe[1]);
      posix_spawn_file_actions_addclose(&fa, out_pipe[0]);
    }
    const int rc = posix_spawnp(&pid_, args[0], &fa, nullptr, args.data(), environ);
    posix_spawn_file_actions_destroy(&fa);
    if (pipe_stdio) {
      ::close(in_pipe[0]);
      ::close(out_pipe[1]);
      to_child_ = in_pipe[1];
      from_child_ = out_pipe[0];
      fcntl(to_child_, F_SETFL, fcntl(to_child_, F_GETFL) | O_NONBLOCK);
      fcntl(from_child_, F_SETFL, fcntl(from_child_, F_GETFL) | O_NONBLOCK);
    }
    if (rc != 0) {
      close_fds();
      pid_ = -1;
      throw ProviderError("cannot start provider '" + argv[0] + "': " + std::strerror(rc), {});
    }
  }

  ChildProcess(const ChildProcess&) = delete;
  ChildProcess& operator=(const ChildProcess&) = delete;

  ~ChildProcess() {
    close_fds();
    if (pid_ > 0) {
      ::kill(pid_, SIGKILL);
      int st = 0;
      ::waitpid(pid_, &st, 0);
    }
  }

  int to_child() const noexcept { return to_child_; }
  int from_child() const noexcept { return from_child_; }

  void close_input() {
    if (to_child_ >= 0) ::close(to_child_);
    to_child_ = -1;
  }

  /// Waits for exit until the deadline; returns the exit status or kills the child.
  int wait(std::chrono::steady_clock::time_point deadline) {
    while (true) {
      int st = 0;
      const pid_t r = ::waitpid(pid_, &st, WNOHANG);
      if (r == pid_) {
        pid_ = -1;
        if (WIFEXITED(st)) return WEXITSTATUS(st);
        return 128 + (WIFSIGNALED(st) ? WTERMSIG(st) : 0);
      }
      if (std::chrono::steady_clock::now() >= deadline) {
        ::kill(pid_, SIGKILL);
        ::waitpid(pid_, &st, 0);
        pid_ = -1;
        throw ProviderError("provider timed out", {});
      }
      ::usleep(2000);
    }
  }

 private:
  void close_fds() {
    if (to_child_ >= 0) ::close(to_child_);
    if (from_child_ >= 0) ::close(from_child_);
    to_child_ = from_child_ = -1;
  }

  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
};

inline void ignore_sigpipe() {
  struct sigaction sa{};
  sa.sa_handler = SIG_IGN;
  sigaction(SIGPIPE, &sa, nullptr);
}

inline std::vector<const StimulusRow*> ok_rows(const StimulusManifest& m) {
  std::vector<const StimulusRow*> rows;
  for (const auto& r : m.rows)
    if (r.ok()) rows.push_back(&r);
  return rows;
}

inline ProviderResult run_file_provider(const ProviderConfig& cfg, const StimulusManifest& stimuli) {
  const auto rows = ok_rows(stimuli);
  const fs::path work = cfg.work_dir.empty() ? fs::temp_directory_path() : cfg.work_dir;
  fs::create_directories(work);
  const std::string tag = std::to_string(::getpid()) + "_" + std::to_string(fnv1a(stimuli.base_dir.string()));
  const fs::path csv_path = work / ("provider_input_" + tag + ".csv");
  const fs::path emb_path = work / ("provider_output_" + tag + ".emb");

  StimulusManifest resolved;
  for (const auto* r : rows) {
    StimulusRow copy = *r;
    copy.path = fs::absolute(stimuli.resolve(*r)).string();
    resolved.rows.push_back(std::move(copy));
  }
  std::ostringstream csv;
  write_stimulus_manifest(csv, resolved);
  write_file_atomic(csv_path, csv.str());
  fs::remove(emb_path);

  std::vector<std::string> argv = cfg.command;
  argv.push_back(csv_path.string());
  argv.push_back(emb_path.string());
  using clock = std::chrono::steady_clock;
  const auto deadline = clock::now() + std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(cfg.timeout_s));
  int status = 0;
  {
    ChildProcess child(argv, false);
    status = child.wait(deadline);
  }
  fs::remove(csv_path);
  if (status != 0) throw ProviderError("provider exited with status " + std::to_string(status), {});
  EmbeddingMatrix raw;
  try {
    raw = read_embeddings(emb_path);
  } catch (const Error& e) {
    throw ProviderError(std::string("provider output unreadable: ") + e.what(), {});
  }
  fs::remove(emb_path);

  ProviderResult res;
  std::vector<std::string> ids;
  std::vector<float> values;
  for (const auto* r : rows) {
    auto i = raw.find(r->image_id);
    if (!i) {
      res.missing.push_back(r->image_id);
      continue;
    }
    ids.push_back(r->image_id);
    const auto v = raw.row(*i);
    values.insert(values.end(), v.begin(), v.end());
  }
  res.embeddings = EmbeddingMatrix(raw.dim(), std::move(ids), std::move(values));
  return res;
}

inline ProviderResult run_stream_provider(const ProviderConfig& cfg, const StimulusManifest& stimuli) {
  using clock = std::chrono::steady_clock;
  ignore_sigpipe();
  const auto rows = ok_rows(stimuli);
  const auto deadline = clock::now() + std::chrono::duration_cast<clock::duration>(std::chrono::duration<double>(cfg.timeout_s));

  std::vector<std::string> ids;
  std::vector<float> values;
  std::size_t dim = 0;
  const auto partial = [&] { return EmbeddingMatrix(dim, ids, values); };
  const auto fail = [&](const std::string& msg) -> ProviderError {
    return ProviderError(msg + " (after " + std::to_string(ids.size()) + " rows)", partial());
  };

  ChildProcess child(cfg.command, true);
  std::string outbuf;        // pending bytes to the child
  std::size_t out_pos = 0;
  std::string inbuf;         // bytes from the child not yet parsed
  std::size_t next_send = 0; // next row to frame
  std::size_t sent = 0;      // frames fully queued
  bool terminator_queued = false;

  const auto queue_frames = [&] {
    while (next_send < rows.size() && next_send - ids.size() < cfg.batch_size) {
      const auto* r = rows[next_send];
      const auto png = read_bytes(stimuli.resolve(*r));
      std::string payload;
      put_le<std::uint16_t>(payload, static_cast<std::uint16_t>(r->image_id.size()));
      payload += r->image_id;
      put_le<std::uint32_t>(payload, static_cast<std::uint32_t>(png.size()));
      payload.append(reinterpret_cast<const char*>(png.data()), png.size());
      put_le<std::uint32_t>(outbuf, static_cast<std::uint32_t>(payload.size()));
      outbuf += payload;
      ++next_send;
      ++sent;
    }
    if (next_send == rows.size() && !terminator_queued) {
      put_le<std::uint32_t>(outbuf, 0);
      terminator_queued = true;
    }
  };

  const auto parse_replies = [&] {
    while (inbuf.size() >= 4) {
      std::uint32_t len;
      std::memcpy(&len, inbuf.data(), 4);
      if (inbuf.size() < 4 + static_cast<std::size_t>(len)) return;
      if (ids.size() >= sent) throw fail("protocol violation: unsolicited reply");
      ByteReader rd(std::span(reinterpret_cast<const std::uint8_t*>(inbuf.data()) + 4, len), "provider reply");
      try {
        const auto id_len = rd.get<std::uint16_t>();
        const std::string id(rd.take(id_len));
        const auto d = rd.get<std::uint32_t>();
        if (d == 0) throw fail("protocol violation: zero dim");
        if (dim == 0) dim = d;
        if (d != dim) throw fail("protocol violation: dim changed from " + std::to_string(dim) + " to " + std::to_string(d));
        const auto raw = rd.take(static_cast<std::size_t>(d) * 4);
        if (rd.remaining() != 0) throw fail("protocol violation: oversized reply frame");
        const auto& expected = rows[ids.size()]->image_id;
        if (id != expected) throw fail("protocol violation: reply for '" + id + "' but expected '" + expected + "'");
        std::vector<float> v(d);
        std::memcpy(v.data(), raw.data(), raw.size());
        for (float x : v)
          if (!std::isfinite(x)) throw fail("non-finite embedding value for '" + id + "'");
        ids.push_back(id);
        values.insert(values.end(), v.begin(), v.end());
      } catch (const FormatError& e) {
        throw fail(std::string("protocol violation: ") + e.what());
      }
      inbuf.erase(0, 4 + static_cast<std::size_t>(len));
    }
  };

  queue_frames();
  bool eof = false;
  while (!eof) {
    pollfd fds[2];
    nfds_t nf = 0;
    fds[nf++] = {child.from_child(), POLLIN, 0};
    const bool writing = child.to_child() >= 0 && out_pos < outbuf.size();
    if (writing) fds[nf++] = {child.to_child(), POLLOUT, 0};
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now()).count();
    if (left <= 0) throw fail("provider timed out");
    const int pr = ::poll(fds, nf, static_cast<int>(std::min<long long>(left, 1000)));
    if (pr < 0) {
      if (errno == EINTR) continue;
      throw fail("poll failed");
    }
    if (writing && (fds[1].revents & (POLLOUT | POLLERR | POLLHUP))) {
      const ssize_t w = ::write(child.to_child(), outbuf.data() + out_pos, outbuf.size() - out_pos);
      if (w < 0 && errno != EAGAIN && errno != EINTR) {
        child.close_input();  // child went away; report through the read side
      } else if (w > 0) {
        out_pos += static_cast<std::size_t>(w);
        if (out_pos == outbuf.size()) {
          outbuf.clear();
          out_pos = 0;
        }
      }
    }
    if (fds[0].revents & (POLLIN | POLLHUP | POLLERR)) {
      char buf[65536];
      const ssize_t r = ::read(child.from_child(), buf, sizeof buf);
      if (r > 0) {
        inbuf.append(buf, static_cast<std::size_t>(r));
        parse_replies();
      } else if (r == 0) {
        eof = true;
      } else if (errno != EAGAIN && errno != EINTR) {
        throw fail("read from provider failed");
      }
    }
    queue_frames();
    if (terminator_queued && outbuf.empty() && child.to_child() >= 0) child.close_input();
  }
  if (!inbuf.empty()) throw fail("protocol violation: truncated reply frame");
  child.close_input();
  int status = 0;
  try {
    status = child.wait(deadline);
  } catch (const ProviderError&) {
    throw fail("provider timed out");
  }
  if (status != 0) throw fail("provider exited with status " + std::to_string(status));
  if (ids.size() != rows.size()) throw fail("provider closed its output early");
  ProviderResult res;
  res.embeddings = partial();
  return res;
}

}  // namespace detail

/// Runs an external embedding provider over the successful stimulus rows.
/// Output rows follow manifest order regardless of provider batching.
inline ProviderResult run_provider(const ProviderConfig& cfg, const StimulusManifest& stimuli) {
  cfg.validate();
  return cfg.mode == ProviderMode::file ? detail::run_file_provider(cfg, stimuli)
                                        : detail::run_stream_provider(cfg, stimuli);
}

}  // namespace psyreid
