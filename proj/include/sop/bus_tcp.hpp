#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <thread>

#include "sop/bus.hpp"

namespace sop {

// ---------------------------------------------------------------------------
// TCP transport: length-prefixed frames (type u8, length u32 LE, payload).
// Request types carry a reply with type | 0x80. The broker side serves one
// shared in-process Broker; one thread per connection.

namespace wire {

inline constexpr uint8_t kHello = 0x01;      // payload: producer_id str16
inline constexpr uint8_t kPublish = 0x02;    // topic str16, payload bytes
inline constexpr uint8_t kSubscribe = 0x03;  // topic str16, mode u8, group str16
inline constexpr uint8_t kPoll = 0x04;       // sub u64, max_wait_ms u32
inline constexpr uint8_t kAck = 0x05;        // sub u64, seq u64
inline constexpr uint8_t kNack = 0x06;       // sub u64, seq u64
inline constexpr uint8_t kError = 0x7f;      // message str16
inline constexpr uint8_t kReplyBit = 0x80;

struct Frame {
  uint8_t type = 0;
  std::vector<uint8_t> payload;
};

inline void write_all(int fd, const uint8_t* data, size_t len) {
  size_t sent = 0;
  while (sent < len) {
    ssize_t n = ::send(fd, data + sent, len - sent, MSG_NOSIGNAL);
    if (n <= 0) throw IoError("socket send failed");
    sent += static_cast<size_t>(n);
  }
}

inline void send_frame(int fd, uint8_t type, std::span<const uint8_t> payload) {
  ByteWriter w;
  w.put_u8(type);
  w.put_u32(static_cast<uint32_t>(payload.size()));
  w.put_bytes(payload);
  write_all(fd, w.bytes().data(), w.size());
}

inline bool read_exact(int fd, uint8_t* data, size_t len) {
  size_t got = 0;
  while (got < len) {
    ssize_t n = ::recv(fd, data + got, len - got, 0);
    if (n == 0) return false;  // orderly shutdown
    if (n < 0) throw IoError("socket recv failed");
    got += static_cast<size_t>(n);
  }
  return true;
}

inline std::optional<Frame> read_frame(int fd, size_t max_payload = 16 * 1024 * 1024) {
  uint8_t header[5];
  if (!read_exact(fd, header, sizeof(header))) return std::nullopt;
  Frame f;
  f.type = header[0];
  uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<uint32_t>(header[1 + i]) << (8 * i);
  if (len > max_payload) throw IoError("oversized wire frame");
  f.payload.resize(len);
  if (len && !read_exact(fd, f.payload.data(), len)) return std::nullopt;
  return f;
}

inline std::vector<uint8_t> encode_envelope(const Envelope& env) {
  ByteWriter w;
  w.put_u8(1);  // has-envelope flag
  w.put_u64(env.seq);
  w.put_str16(env.topic);
  w.put_str16(env.producer_id);
  w.put_u64(env.producer_seq);
  w.put_bytes(env.payload);
  return w.take();
}

inline std::optional<Envelope> decode_envelope(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  if (r.get_u8() == 0) return std::nullopt;
  Envelope env;
  env.seq = r.get_u64();
  env.topic = r.get_str16();
  env.producer_id = r.get_str16();
  env.producer_seq = r.get_u64();
  env.payload = r.get_bytes(r.remaining());
  return env;
}

}  // namespace wire

// ---------------------------------------------------------------------------
// Server: accepts connections and forwards requests to a shared Broker.

class BusServer {
 public:
  explicit BusServer(Broker& broker, uint16_t port = 0) : broker_(broker) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw IoError("socket() failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(port);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
      throw IoError("bind() failed on port " + std::to_string(port));
    socklen_t len = sizeof(addr);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    if (::listen(listen_fd_, 64) != 0) throw IoError("listen() failed");
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  ~BusServer() { stop(); }

  uint16_t port() const { return port_; }

  void stop() {
    bool expected = false;
    if (!stopping_.compare_exchange_strong(expected, true)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (accept_thread_.joinable()) accept_thread_.join();
    for (auto& t : workers_)
      if (t.joinable()) t.join();
  }

 private:
  void accept_loop() {
    while (!stopping_) {
      int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (stopping_) break;
        continue;
      }
      std::lock_guard<std::mutex> lock(workers_mu_);
      workers_.emplace_back([this, fd] { serve(fd); });
    }
  }

  void serve(int fd) {
    std::string producer_id = "tcp-client";
    try {
      while (true) {
        auto frame = wire::read_frame(fd);
        if (!frame) break;
        ByteReader r(frame->payload);
        switch (frame->type) {
          case wire::kHello: {
            producer_id = r.get_str16();
            wire::send_frame(fd, wire::kHello | wire::kReplyBit, {});
            break;
          }
          case wire::kPublish: {
            std::string topic = r.get_str16();
            std::vector<uint8_t> payload = r.get_bytes(r.remaining());
            uint64_t seq = broker_.publish(topic, std::move(payload), producer_id);
            ByteWriter w;
            w.put_u64(seq);
            wire::send_frame(fd, wire::kPublish | wire::kReplyBit, w.bytes());
            break;
          }
          case wire::kSubscribe: {
            std::string topic = r.get_str16();
            SubMode mode = static_cast<SubMode>(r.get_u8());
            std::string group = r.get_str16();
            uint64_t sub = broker_.subscribe(topic, mode, group);
            ByteWriter w;
            w.put_u64(sub);
            wire::send_frame(fd, wire::kSubscribe | wire::kReplyBit, w.bytes());
            break;
          }
          case wire::kPoll: {
            uint64_t sub = r.get_u64();
            uint32_t max_wait = r.get_u32();
            auto env = broker_.poll_wait(sub, max_wait);
            if (env) {
              wire::send_frame(fd, wire::kPoll | wire::kReplyBit,
                               wire::encode_envelope(*env));
            } else {
              ByteWriter w;
              w.put_u8(0);
              wire::send_frame(fd, wire::kPoll | wire::kReplyBit, w.bytes());
            }
            break;
          }
          case wire::kAck: {
            uint64_t sub = r.get_u64();
            uint64_t seq = r.get_u64();
            broker_.ack(sub, seq);
            wire::send_frame(fd, wire::kAck | wire::kReplyBit, {});
            break;
          }
          case wire::kNack: {
            uint64_t sub = r.get_u64();
            uint64_t seq = r.get_u64();
            broker_.nack(sub, seq);
            wire::send_frame(fd, wire::kNack | wire::kReplyBit, {});
            break;
          }
          default: {
            ByteWriter w;
            w.put_str16("unknown frame type");
            wire::send_frame(fd, wire::kError, w.bytes());
            break;
          }
        }
      }
    } catch (const std::exception& e) {
      log_warn(std::string("bus connection closed: ") + e.what());
    }
    ::close(fd);
  }

  Broker& broker_;
  int listen_fd_ = -1;
  uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread accept_thread_;
  std::mutex workers_mu_;
  std::vector<std::thread> workers_;
};

// ---------------------------------------------------------------------------
// Client: blocking request/reply over one connection.

class TcpBusClient : public BusClient {
 public:
  TcpBusClient(const std::string& host, uint16_t port, std::string producer_id,
               uint32_t poll_wait_ms = 10)
      : poll_wait_ms_(poll_wait_ms) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw IoError("socket() failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(port);
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1)
      throw IoError("bad broker address " + host);
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0)
      throw IoError("cannot connect to broker at " + host + ":" + std::to_string(port));
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    ByteWriter w;
    w.put_str16(producer_id);
    request(wire::kHello, w.bytes());
  }

  ~TcpBusClient() override {
    if (fd_ >= 0) ::close(fd_);
  }

  TcpBusClient(const TcpBusClient&) = delete;
  TcpBusClient& operator=(const TcpBusClient&) = delete;

  uint64_t publish(const std::string& topic, std::vector<uint8_t> payload) override {
    ByteWriter w;
    w.put_str16(topic);
    w.put_bytes(payload);
    std::vector<uint8_t> reply = request(wire::kPublish, w.bytes());
    ByteReader r(reply);
    return r.get_u64();
  }

  uint64_t subscribe(const std::string& topic, SubMode mode,
                     const std::string& group_id) override {
    ByteWriter w;
    w.put_str16(topic);
    w.put_u8(static_cast<uint8_t>(mode));
    w.put_str16(group_id);
    std::vector<uint8_t> reply = request(wire::kSubscribe, w.bytes());
    ByteReader r(reply);
    return r.get_u64();
  }

  std::optional<Envelope> poll(uint64_t sub_id) override {
    ByteWriter w;
    w.put_u64(sub_id);
    w.put_u32(poll_wait_ms_);
    std::vector<uint8_t> reply = request(wire::kPoll, w.bytes());
    return wire::decode_envelope(reply);
  }

  void ack(uint64_t sub_id, uint64_t seq) override {
    ByteWriter w;
    w.put_u64(sub_id);
    w.put_u64(seq);
    request(wire::kAck, w.bytes());
  }

  void nack(uint64_t sub_id, uint64_t seq) override {
    ByteWriter w;
    w.put_u64(sub_id);
    w.put_u64(seq);
    request(wire::kNack, w.bytes());
  }

 private:
  std::vector<uint8_t> request(uint8_t type, std::span<const uint8_t> payload) {
    std::lock_guard<std::mutex> lock(mu_);
    wire::send_frame(fd_, type, payload);
    auto reply = wire::read_frame(fd_);
    if (!reply) throw IoError("broker closed connection");
    if (reply->type == wire::kError) {
      ByteReader r(reply->payload);
      throw IoError("broker error: " + r.get_str16());
    }
    if (reply->type != (type | wire::kReplyBit))
      throw IoError("unexpected reply frame type");
    return std::move(reply->payload);
  }

  int fd_ = -1;
  uint32_t poll_wait_ms_;
  std::mutex mu_;
};

}  // namespace sop
