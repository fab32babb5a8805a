#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <mutex>
#include <thread>

#include "ewirp/channel.hpp"
#include "ewirp/frame.hpp"
#include "ewirp/pipeline.hpp"

namespace ewirp {

namespace netdetail {

struct Fd {
  int fd = -1;
  Fd() = default;
  explicit Fd(int f) : fd(f) {}
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  Fd(Fd&& o) noexcept : fd(o.fd) { o.fd = -1; }
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      close_now();
      fd = o.fd;
      o.fd = -1;
    }
    return *this;
  }
  ~Fd() { close_now(); }
  void close_now() {
    if (fd >= 0) {
      ::close(fd);
      fd = -1;
    }
  }
};

inline bool send_all(int fd, const void* data, size_t n) {
  const char* p = static_cast<const char*>(data);
  while (n > 0) {
    const ssize_t w = ::send(fd, p, n, MSG_NOSIGNAL);
    if (w <= 0) {
      if (w < 0 && errno == EINTR) continue;
      return false;
    }
    p += w;
    n -= static_cast<size_t>(w);
  }
  return true;
}

// Returns bytes read (0 on orderly close, -1 on error).
inline ssize_t recv_some(int fd, void* data, size_t cap) {
  while (true) {
    const ssize_t r = ::recv(fd, data, cap, 0);
    if (r < 0 && errno == EINTR) continue;
    return r;
  }
}

inline bool recv_exact(int fd, void* data, size_t n) {
  char* p = static_cast<char*>(data);
  while (n > 0) {
    const ssize_t r = recv_some(fd, p, n);
    if (r <= 0) return false;
    p += r;
    n -= static_cast<size_t>(r);
  }
  return true;
}

inline int connect_to(const std::string& host, int port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
  require(rc == 0, "cannot resolve ", host, ": ", gai_strerror(rc));
  int fd = -1;
  std::string err = "no addresses";
  for (addrinfo* a = res; a; a = a->ai_next) {
    fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) break;
    err = std::strerror(errno);
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  require(fd >= 0, "cannot connect to ", host, ":", port, " (", err, ")");
  const int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return fd;
}

inline int listen_on(const std::string& host, int& port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  require(fd >= 0, "socket: ", std::strerror(errno));
  const int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<u16>(port));
  if (host.empty() || host == "0.0.0.0") {
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
  } else {
    require(::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1, "bad bind address ", host);
  }
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
      ::listen(fd, 16) != 0) {
    const std::string err = std::strerror(errno);
    ::close(fd);
    throw std::runtime_error(cat("cannot listen on ", host, ":", port, " (", err, ")"));
  }
  sockaddr_in got{};
  socklen_t len = sizeof(got);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&got), &len);
  port = ntohs(got.sin_port);
  return fd;
}

// Accept loop with session threads; stop() unblocks accept by closing the
// listening socket and shuts down live sessions.
class SessionHost {
 public:
  void start(const std::string& host, int port, std::function<void(int)> session) {
    port_ = port;
    listen_fd_ = listen_on(host, port_);
    session_ = std::move(session);
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  int port() const { return port_; }

  void stop() {
    if (stopped_.exchange(true)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    {
      std::lock_guard<std::mutex> lk(mu_);
      for (int fd : live_) ::shutdown(fd, SHUT_RDWR);
    }
    if (accept_thread_.joinable()) accept_thread_.join();
    for (auto& t : sessions_)
      if (t.joinable()) t.join();
  }

  ~SessionHost() { stop(); }

 private:
  void accept_loop() {
    while (true) {
      const int cfd = ::accept(listen_fd_, nullptr, nullptr);
      if (cfd < 0) {
        if (errno == EINTR) continue;
        break;  // listening socket closed
      }
      const int one = 1;
      ::setsockopt(cfd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      {
        std::lock_guard<std::mutex> lk(mu_);
        live_.push_back(cfd);
      }
      sessions_.emplace_back([this, cfd] {
        session_(cfd);
        ::close(cfd);
        std::lock_guard<std::mutex> lk(mu_);
        live_.erase(std::remove(live_.begin(), live_.end(), cfd), live_.end());
      });
    }
  }

  int listen_fd_ = -1;
  int port_ = 0;
  std::function<void(int)> session_;
  std::thread accept_thread_;
  std::vector<std::thread> sessions_;
  std::vector<int> live_;
  std::mutex mu_;
  std::atomic<bool> stopped_{false};
};

// Drops buffered bytes up to the next frame magic (or everything).
inline void resync(std::string& buf) {
  const size_t pos = buf.find("EWIR", 1);
  buf.erase(0, pos == std::string::npos ? buf.size() : pos);
}

}  // namespace netdetail

// ---------------------------------------------------------------------------
// Edge server: equalize -> decoder -> rest-of-backbone -> top-5 reply
// ---------------------------------------------------------------------------

class EdgeServer {
 public:
  EdgeServer(const CodecConfig& ccfg, ModelGraph decoder, ModelGraph rest, ParamStore<float> ps)
      : ccfg_(ccfg), decoder_(std::move(decoder)), rest_(std::move(rest)), ps_(std::move(ps)) {
    ps_.mode = Mode::eval;
  }

  void start(const std::string& host, int port) {
    host_.start(host, port, [this](int fd) { session(fd); });
  }
  int port() const { return host_.port(); }
  void stop() { host_.stop(); }

  i64 frames_ok() const { return frames_ok_.load(); }
  i64 frames_rejected() const { return frames_rejected_.load(); }

 private:
  void session(int fd) {
    std::string buf;
    char chunk[4096];
    while (true) {
      const auto* data = reinterpret_cast<const u8*>(buf.data());
      const FrameDecode fr = decode_frame(data, buf.size());
      if (fr.status == FrameDecode::Status::need_more) {
        const ssize_t r = netdetail::recv_some(fd, chunk, sizeof(chunk));
        if (r <= 0) return;
        buf.append(chunk, static_cast<size_t>(r));
        continue;
      }
      if (fr.status == FrameDecode::Status::error) {
        frames_rejected_.fetch_add(1);
        const std::string reply = encode_reply(kReplyError, TopEntries{});
        if (!netdetail::send_all(fd, reply.data(), reply.size())) return;
        if (fr.consumed > 0)
          buf.erase(0, fr.consumed);
        else
          netdetail::resync(buf);
        continue;
      }
      buf.erase(0, fr.consumed);
      std::string reply;
      try {
        reply = encode_reply(kReplyTopk, infer(fr));
        frames_ok_.fetch_add(1);
      } catch (const std::exception&) {
        frames_rejected_.fetch_add(1);
        reply = encode_reply(kReplyError, TopEntries{});
      }
      if (!netdetail::send_all(fd, reply.data(), reply.size())) return;
    }
  }

  TopEntries infer(const FrameDecode& fr) {
    require(static_cast<i64>(fr.block.symbols.size()) == ccfg_.bandwidth, "frame carries ",
            fr.block.symbols.size(), " symbols but the codec expects ", ccfg_.bandwidth);
    const std::complex<double> h = fr.h.value_or(std::complex<double>{1.0, 0.0});
    const auto ztilde = equalize(fr.block.symbols, h);
    ComplexSymbolBlock blk;
    blk.symbols = ztilde;
    const auto reals = complex_to_reals(blk);
    Tensor<float> dec_in({1, ccfg_.enc_channels(), ccfg_.split_h / 4, ccfg_.split_w / 4});
    require(dec_in.numel() == static_cast<i64>(reals.size()), "symbol count mismatch");
    for (i64 i = 0; i < dec_in.numel(); ++i) dec_in.v[i] = static_cast<float>(reals[i]);
    std::lock_guard<std::mutex> lk(infer_mu_);
    const Tensor<float> feat = graph_forward(decoder_, ps_, dec_in, static_cast<Tape<float>*>(nullptr));
    const Tensor<float> logits = graph_forward(rest_, ps_, feat, static_cast<Tape<float>*>(nullptr));
    const Tensor<float> probs = softmax(logits);
    const auto order = topk_indices(probs.data(), probs.dim(1), 5);
    TopEntries top{};
    for (size_t i = 0; i < top.size() && i < order.size(); ++i)
      top[i] = {static_cast<u16>(order[i]), probs.v[order[i]]};
    return top;
  }

  CodecConfig ccfg_;
  ModelGraph decoder_, rest_;
  ParamStore<float> ps_;
  std::mutex infer_mu_;
  netdetail::SessionHost host_;
  std::atomic<i64> frames_ok_{0}, frames_rejected_{0};
};

// ---------------------------------------------------------------------------
// Channel proxy: applies h·z + n to each in-flight frame and stamps h into it
// (the server's perfect CSI), then pipes the reply back.
// ---------------------------------------------------------------------------

class ChannelProxy {
 public:
  ChannelProxy(ChannelConfig cfg, std::string upstream_host, int upstream_port)
      : cfg_(cfg), up_host_(std::move(upstream_host)), up_port_(upstream_port) {}

  void start(const std::string& host, int port) {
    host_.start(host, port, [this](int fd) { session(fd); });
  }
  int port() const { return host_.port(); }
  void stop() { host_.stop(); }
  i64 frames_forwarded() const { return frames_.load(); }

 private:
  void session(int fd) {
    netdetail::Fd up;
    try {
      up = netdetail::Fd(netdetail::connect_to(up_host_, up_port_));
    } catch (const std::exception&) {
      return;
    }
    std::string buf;
    char chunk[4096];
    while (true) {
      const auto* data = reinterpret_cast<const u8*>(buf.data());
      const FrameDecode fr = decode_frame(data, buf.size());
      if (fr.status == FrameDecode::Status::need_more) {
        const ssize_t r = netdetail::recv_some(fd, chunk, sizeof(chunk));
        if (r <= 0) return;
        buf.append(chunk, static_cast<size_t>(r));
        continue;
      }
      if (fr.status == FrameDecode::Status::error) {
        // Forward the malformed bytes untouched; the server owns the error reply.
        const size_t drop = fr.consumed > 0 ? fr.consumed : buf.size();
        if (!netdetail::send_all(up.fd, buf.data(), drop)) return;
        buf.erase(0, drop);
        if (!pipe_reply(up.fd, fd)) return;
        continue;
      }
      buf.erase(0, fr.consumed);
      const ChannelRealization real =
          sample_realization(cfg_, static_cast<i64>(fr.block.symbols.size()),
                             mix_streams(stream_tag("proxy.frame"), frames_.fetch_add(1)));
      ComplexSymbolBlock out;
      out.symbols = apply_channel(fr.block.symbols, real);
      const std::string fwd = encode_frame(out, real.h);
      if (!netdetail::send_all(up.fd, fwd.data(), fwd.size())) return;
      if (!pipe_reply(up.fd, fd)) return;
    }
  }

  static bool pipe_reply(int up_fd, int down_fd) {
    std::array<u8, kReplyBytes> reply;
    if (!netdetail::recv_exact(up_fd, reply.data(), reply.size())) return false;
    return netdetail::send_all(down_fd, reply.data(), reply.size());
  }

  ChannelConfig cfg_;
  std::string up_host_;
  int up_port_;
  netdetail::SessionHost host_;
  std::atomic<u64> frames_{0};
};

// ---------------------------------------------------------------------------
// Device side
// ---------------------------------------------------------------------------

// front -> encoder -> power-normalized symbol block for one image.
inline ComplexSymbolBlock device_encode(const ModelGraph& front, const ModelGraph& encoder,
                                        ParamStore<float>& ps, const Tensor<float>& image,
                                        double P) {
  require(image.dim(0) == 1, "device encodes one image at a time, got batch ", image.dim(0));
  const Mode keep = ps.mode;
  ps.mode = Mode::eval;
  const Tensor<float> mid = graph_forward(front, ps, image, static_cast<Tape<float>*>(nullptr));
  const Tensor<float> enc_out = graph_forward(encoder, ps, mid, static_cast<Tape<float>*>(nullptr));
  ps.mode = keep;
  std::vector<double> v(enc_out.numel());
  for (i64 i = 0; i < enc_out.numel(); ++i) v[i] = enc_out.v[i];
  return reals_to_complex_normalized(v.data(), static_cast<i64>(v.size()), P);
}

// Sends one block and awaits the top-5 reply.
inline ReplyDecode device_send(const std::string& host, int port, const ComplexSymbolBlock& blk) {
  netdetail::Fd fd(netdetail::connect_to(host, port));
  const std::string frame = encode_frame(blk);
  require(netdetail::send_all(fd.fd, frame.data(), frame.size()), "send failed to ", host, ":",
          port);
  std::array<u8, kReplyBytes> reply;
  require(netdetail::recv_exact(fd.fd, reply.data(), reply.size()), "connection closed by ", host,
          ":", port, " before a reply arrived");
  ReplyDecode r = decode_reply(reply.data(), reply.size());
  require(r.status == ReplyDecode::Status::ok, "malformed reply: ", r.reason);
  return r;
}

}  // namespace ewirp
