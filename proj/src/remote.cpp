#include "gridfill/remote.hpp"

#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <deque>
#include <set>

namespace gridfill {

using nlohmann::json;

namespace {

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(std::uint8_t(v >> s));
}

std::uint32_t get_u32_be(const std::uint8_t* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | std::uint32_t(p[3]);
}

void put_f32_le(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  for (int s = 0; s < 32; s += 8) out.push_back(std::uint8_t(v >> s));
}

float get_f32_le(const std::uint8_t* p) {
  const std::uint32_t v =
      std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}

/// Header lengths above this are treated as corruption.
constexpr std::uint32_t max_header_bytes = 1u << 20;

std::size_t payload_bytes(const json& header) {
  const auto it = header.find("payload_bytes");
  if (it == header.end()) return 0;
  if (!it->is_number_unsigned() || it->get<std::uint64_t>() % 4 != 0)
    throw BackendError("frame: payload_bytes must be a non-negative multiple of 4");
  return it->get<std::size_t>();
}

json shape_json(const Shape& s) { return json::array({s.height, s.width, s.channels}); }

std::optional<Shape> parse_shape(const json& header, const char* key) {
  const auto it = header.find(key);
  if (it == header.end() || !it->is_array() || it->size() != 3) return std::nullopt;
  for (const auto& d : *it)
    if (!d.is_number_integer() || d.get<long>() < 0 || d.get<long>() > (1L << 20)) return std::nullopt;
  return Shape{(*it)[0].get<int>(), (*it)[1].get<int>(), (*it)[2].get<int>()};
}

std::string error_text(int err) { return std::strerror(err); }

class SocketTransport final : public Transport {
 public:
  explicit SocketTransport(int fd) : fd_(fd) {}
  ~SocketTransport() override { ::close(fd_); }

  void write_all(const std::uint8_t* data, std::size_t n) override {
    while (n > 0) {
      const ssize_t w = ::send(fd_, data, n, MSG_NOSIGNAL);
      if (w < 0) {
        if (errno == EINTR) continue;
        throw BackendError("remote: send failed: " + error_text(errno));
      }
      data += w;
      n -= std::size_t(w);
    }
  }

  void read_exact(std::uint8_t* data, std::size_t n, std::chrono::milliseconds timeout) override {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (n > 0) {
      const auto left =
          std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) throw BackendError("remote: timed out after " + std::to_string(timeout.count()) + " ms");
      pollfd p{fd_, POLLIN, 0};
      const int r = ::poll(&p, 1, int(left.count()));
      if (r < 0 && errno == EINTR) continue;
      if (r < 0) throw BackendError("remote: poll failed: " + error_text(errno));
      if (r == 0) continue;
      const ssize_t got = ::recv(fd_, data, n, 0);
      if (got < 0 && errno == EINTR) continue;
      if (got < 0) throw BackendError("remote: recv failed: " + error_text(errno));
      if (got == 0) throw BackendError("remote: connection closed by server");
      data += got;
      n -= std::size_t(got);
    }
  }

 private:
  int fd_;
};

struct HostPort {
  std::string host;
  std::string port;
};

HostPort split_host_port(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size())
    throw ConfigError("endpoint '" + s + "' is not host:port");
  return {s.substr(0, colon), s.substr(colon + 1)};
}

sockaddr_un unix_address(const std::string& path) {
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  if (path.empty() || path.size() >= sizeof addr.sun_path) throw ConfigError("unix socket path '" + path + "' is invalid");
  std::memcpy(addr.sun_path, path.c_str(), path.size() + 1);
  return addr;
}

}  // namespace

std::vector<std::uint8_t> encode_frame(const WireFrame& frame) {
  json header = frame.header;
  header["payload_bytes"] = frame.payload.size() * 4;
  const std::string text = header.dump();
  std::vector<std::uint8_t> out;
  out.reserve(4 + text.size() + frame.payload.size() * 4);
  put_u32_be(out, std::uint32_t(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  for (float f : frame.payload) put_f32_le(out, f);
  return out;
}

WireFrame decode_frame(const std::vector<std::uint8_t>& bytes, std::size_t& pos) {
  if (bytes.size() - pos < 4) throw BackendError("frame: truncated length prefix");
  const std::uint32_t hlen = get_u32_be(&bytes[pos]);
  if (hlen > max_header_bytes) throw BackendError("frame: header length " + std::to_string(hlen) + " is implausible");
  if (bytes.size() - pos - 4 < hlen) throw BackendError("frame: truncated header");
  WireFrame f;
  try {
    f.header = json::parse(bytes.begin() + std::ptrdiff_t(pos + 4), bytes.begin() + std::ptrdiff_t(pos + 4 + hlen));
  } catch (const json::exception& e) {
    throw BackendError(std::string("frame: header is not JSON: ") + e.what());
  }
  if (!f.header.is_object()) throw BackendError("frame: header must be a JSON object");
  const std::size_t n = payload_bytes(f.header);
  const std::size_t start = pos + 4 + hlen;
  if (bytes.size() - start < n) throw BackendError("frame: truncated payload");
  f.payload.resize(n / 4);
  for (std::size_t i = 0; i < f.payload.size(); ++i) f.payload[i] = get_f32_le(&bytes[start + 4 * i]);
  pos = start + n;
  return f;
}

std::vector<WireFrame> decode_frames(const std::vector<std::uint8_t>& bytes) {
  std::vector<WireFrame> out;
  std::size_t pos = 0;
  while (pos < bytes.size()) out.push_back(decode_frame(bytes, pos));
  return out;
}

std::unique_ptr<Transport> connect_endpoint(const std::string& endpoint) {
  if (endpoint.rfind("unix:", 0) == 0) {
    const sockaddr_un addr = unix_address(endpoint.substr(5));
    const int fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
    if (fd < 0) throw BackendError("remote: socket failed: " + error_text(errno));
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
      const int err = errno;
      ::close(fd);
      throw BackendError("remote: cannot connect to " + endpoint + ": " + error_text(err));
    }
    return std::make_unique<SocketTransport>(fd);
  }
  const HostPort hp = split_host_port(endpoint.rfind("tcp:", 0) == 0 ? endpoint.substr(4) : endpoint);
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (const int rc = ::getaddrinfo(hp.host.c_str(), hp.port.c_str(), &hints, &res); rc != 0)
    throw BackendError("remote: cannot resolve " + endpoint + ": " + ::gai_strerror(rc));
  std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, ::freeaddrinfo);
  std::string last = "no addresses";
  for (addrinfo* a = res; a; a = a->ai_next) {
    const int fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) return std::make_unique<SocketTransport>(fd);
    last = error_text(errno);
    ::close(fd);
  }
  throw BackendError("remote: cannot connect to " + endpoint + ": " + last);
}

void write_frame(Transport& t, const WireFrame& f) {
  const auto bytes = encode_frame(f);
  t.write_all(bytes.data(), bytes.size());
}

WireFrame read_frame(Transport& t, std::chrono::milliseconds timeout) {
  std::vector<std::uint8_t> bytes(4);
  t.read_exact(bytes.data(), 4, timeout);
  const std::uint32_t hlen = get_u32_be(bytes.data());
  if (hlen > max_header_bytes) throw BackendError("frame: header length " + std::to_string(hlen) + " is implausible");
  bytes.resize(4 + hlen);
  t.read_exact(bytes.data() + 4, hlen, timeout);
  json header;
  try {
    header = json::parse(bytes.begin() + 4, bytes.end());
  } catch (const json::exception& e) {
    throw BackendError(std::string("frame: header is not JSON: ") + e.what());
  }
  if (!header.is_object()) throw BackendError("frame: header must be a JSON object");
  const std::size_t n = payload_bytes(header);
  bytes.resize(4 + hlen + n);
  t.read_exact(bytes.data() + 4 + hlen, n, timeout);
  std::size_t pos = 0;
  return decode_frame(bytes, pos);
}

WireFrame make_handshake_request(std::int64_t id) {
  return WireFrame{{{"id", id}, {"op", "handshake"}, {"version", protocol_version}}, {}};
}

WireFrame make_codec_request(std::int64_t id, const std::string& op, const Tensor3<float>& x) {
  WireFrame f{{{"id", id}, {"op", op}, {"shape", shape_json(x.shape())}}, {}};
  f.payload.assign(x.values().data(), x.values().data() + x.size());
  return f;
}

WireFrame make_predict_request(std::int64_t id, const Tensor3<float>& z_t, int t, const Conditioning<float>& cond,
                           const GuidanceScales& scales) {
  const Conditioning<float> eff = cond.effective();
  const Shape s = z_t.shape();
  Tensor3<float> image = eff.image.size() != 0 ? eff.image : Tensor3<float>(s);
  if (image.shape() != s) throw ShapeError("predict_noise: conditioning image shape differs from the latent");
  // No mask means every pixel of a given image is known, or none without one.
  Mask<float> mask = eff.mask.size() != 0 ? eff.mask
                                          : Mask<float>::Constant(s.height, s.width, eff.image.size() != 0 ? 1.0f : 0.0f);
  if (mask.rows() != s.height || mask.cols() != s.width)
    throw ShapeError("predict_noise: conditioning mask shape differs from the latent");
  WireFrame f{{{"id", id},
           {"op", "predict_noise"},
           {"shape", shape_json(s)},
           {"t", t},
           {"scales", {{"s_image", scales.s_image}, {"s_text", scales.s_text}}},
           {"text", eff.text ? json(*eff.text) : json()},
           {"mask_shape", json::array({s.height, s.width})}},
          {}};
  f.payload.reserve(std::size_t(2 * z_t.size() + mask.size()));
  f.payload.insert(f.payload.end(), z_t.values().data(), z_t.values().data() + z_t.size());
  f.payload.insert(f.payload.end(), image.values().data(), image.values().data() + image.size());
  f.payload.insert(f.payload.end(), mask.data(), mask.data() + mask.size());
  return f;
}

Tensor3<float> parse_tensor_response(const WireFrame& response, std::int64_t id, const std::string& op,
                                     const std::optional<Shape>& expected) {
  const json& h = response.header;
  if (!h.contains("id") || !h["id"].is_number_integer() || h["id"].get<std::int64_t>() != id)
    throw BackendError("remote " + op + ": response id does not match request " + std::to_string(id));
  if (h.contains("error"))
    throw BackendError("remote " + op + " failed: " + (h["error"].is_string() ? h["error"].get<std::string>() : h["error"].dump()));
  if (h.value("op", std::string()) != op) throw BackendError("remote " + op + ": response has op " + h.value("op", std::string("?")));
  const auto shape = parse_shape(h, "shape");
  if (!shape) throw BackendError("remote " + op + ": response has no valid shape");
  if (expected && *shape != *expected)
    throw BackendError("remote " + op + ": expected shape " + to_string(*expected) + ", server sent " + to_string(*shape));
  if (Eigen::Index(response.payload.size()) != shape->size())
    throw BackendError("remote " + op + ": payload holds " + std::to_string(response.payload.size()) +
                       " values, shape " + to_string(*shape) + " needs " + std::to_string(shape->size()));
  Tensor3<float> out(*shape);
  for (std::size_t i = 0; i < response.payload.size(); ++i) {
    if (!std::isfinite(response.payload[i])) throw BackendError("remote " + op + ": response contains non-finite values");
    out.values()[Eigen::Index(i)] = response.payload[i];
  }
  return out;
}

RemoteClient::RemoteClient(std::unique_ptr<Transport> transport, Options options)
    : transport_(std::move(transport)), options_(options) {
  if (options_.window < 1) throw ConfigError("remote: window must be positive");
  if (options_.timeout.count() <= 0) throw ConfigError("remote: timeout must be positive");
  const WireFrame r = call(make_handshake_request(0));
  const json& h = r.header;
  if (h.contains("error")) throw BackendError("remote handshake failed: " + h["error"].dump());
  info_.version = h.value("version", 0);
  if (info_.version != protocol_version)
    throw BackendError("remote: server speaks protocol version " + std::to_string(info_.version) + ", client speaks " +
                       std::to_string(protocol_version));
  if (h.contains("latent_shape")) {
    const auto s = parse_shape(h, "latent_shape");
    if (!s) throw BackendError("remote: handshake latent_shape is malformed");
    info_.latent_shape = *s;
  }
  info_.supports_text = h.value("supports_text", false);
  info_.deterministic = h.value("deterministic", true);
  info_.scale_factor = h.value("scale_factor", 1);
  if (info_.scale_factor < 1) throw BackendError("remote: handshake scale_factor must be positive");
}

WireFrame RemoteClient::call(WireFrame request) {
  std::vector<WireFrame> one;
  one.push_back(std::move(request));
  return std::move(call_many(std::move(one)).front());
}

std::vector<WireFrame> RemoteClient::call_many(std::vector<WireFrame> requests) {
  std::lock_guard lock(mutex_);
  const std::size_t n = requests.size();
  std::vector<std::int64_t> ids(n);
  std::vector<WireFrame> out(n);
  std::size_t sent = 0, done = 0;
  while (done < n) {
    while (sent < n && sent - done < std::size_t(options_.window)) {
      ids[sent] = next_id_++;
      requests[sent].header["id"] = ids[sent];
      write_frame(*transport_, requests[sent]);
      pending_.emplace(ids[sent], WireFrame{json(nullptr), {}});
      ++sent;
    }
    out[done] = receive(ids[done]);
    ++done;
  }
  return out;
}

WireFrame RemoteClient::receive(std::int64_t id) {
  // pending_ holds a null header for requests still in flight.
  auto it = pending_.find(id);
  while (it->second.header.is_null()) {
    WireFrame f = read_frame(*transport_, options_.timeout);
    if (!f.header.contains("id") || !f.header["id"].is_number_integer())
      throw BackendError("remote: response without an id" +
                         (f.header.contains("error") ? ": " + f.header["error"].dump() : std::string()));
    const auto slot = pending_.find(f.header["id"].get<std::int64_t>());
    if (slot == pending_.end()) throw BackendError("remote: response for unknown request " + f.header["id"].dump());
    slot->second = std::move(f);
  }
  WireFrame f = std::move(it->second);
  pending_.erase(it);
  return f;
}

RemoteBackend::RemoteBackend(const std::string& endpoint, RemoteClient::Options options)
    : client_(std::make_shared<RemoteClient>(connect_endpoint(endpoint), options)) {}

BackendDescriptor RemoteBackend::descriptor() const {
  const HandshakeInfo& i = client_->info();
  return {.name = "remote",
          .latent_shape = i.latent_shape,
          .supports_text = i.supports_text,
          .grid_aware = false,
          .applies_guidance = true,
          .deterministic = i.deterministic};
}

Tensor3<float> RemoteBackend::predict_noise(const Tensor3<float>& z_t, int t, const Conditioning<float>& cond) const {
  // (0, 0) selects the image-only branch, (1, 0) the image+text branch.
  const bool text = cond.text && !cond.drop_text;
  return predict_guided(z_t, t, cond, GuidanceScales{.s_image = text ? 1.0 : 0.0, .s_text = 0.0});
}

Tensor3<float> RemoteBackend::predict_guided(const Tensor3<float>& z_t, int t, const Conditioning<float>& cond,
                                             const GuidanceScales& scales) const {
  return predict_guided_many({z_t}, t, {cond}, scales).front();
}

std::vector<Tensor3<float>> RemoteBackend::predict_guided_many(const std::vector<Tensor3<float>>& z_t, int t,
                                                               const std::vector<Conditioning<float>>& cond,
                                                               const GuidanceScales& scales) const {
  if (z_t.size() != cond.size()) throw ShapeError("predict_guided_many: latents and conditionings differ in count");
  std::vector<WireFrame> requests;
  for (std::size_t k = 0; k < z_t.size(); ++k) {
    check_shape(z_t[k], cond[k]);
    requests.push_back(make_predict_request(0, z_t[k], t, cond[k], scales));
  }
  const std::vector<WireFrame> responses = client_->call_many(std::move(requests));
  std::vector<Tensor3<float>> out;
  for (std::size_t k = 0; k < z_t.size(); ++k)
    out.push_back(parse_tensor_response(responses[k], responses[k].header.value("id", std::int64_t(-1)),
                                        "predict_noise", z_t[k].shape()));
  return out;
}

Tensor3<float> RemoteBackend::encode(const Tensor3<float>& pixels) const {
  const WireFrame r = client_->call(make_codec_request(0, "encode", pixels));
  const int f = scale_factor();
  const Shape want = client_->info().latent_shape;
  std::optional<Shape> expected;
  if (want.channels > 0) expected = Shape{pixels.height() / f, pixels.width() / f, want.channels};
  return parse_tensor_response(r, r.header.value("id", std::int64_t(-1)), "encode", expected);
}

Tensor3<float> RemoteBackend::decode(const Tensor3<float>& latent) const {
  const WireFrame r = client_->call(make_codec_request(0, "decode", latent));
  const int f = scale_factor();
  std::optional<Shape> expected;
  if (f == 1) expected = latent.shape();
  return parse_tensor_response(r, r.header.value("id", std::int64_t(-1)), "decode", expected);
}

WireFrame StubModel::handle(const WireFrame& request) const {
  const json& h = request.header;
  const json id = h.contains("id") && h["id"].is_number_integer() ? h["id"] : json();
  const std::string op = h.contains("op") && h["op"].is_string() ? h["op"].get<std::string>() : std::string();
  auto error = [&](const std::string& msg) { return WireFrame{{{"id", id}, {"op", op}, {"error", msg}}, {}}; };
  if (id.is_null()) return error("request has no integer id");

  if (op == "handshake") {
    return WireFrame{{{"id", id},
                  {"op", op},
                  {"version", version},
                  {"latent_shape", shape_json(latent_shape)},
                  {"supports_text", false},
                  {"deterministic", true},
                  {"scale_factor", 1}},
                 {}};
  }
  if (op != "encode" && op != "decode" && op != "predict_noise") return error("unknown op '" + op + "'");
  const auto shape = parse_shape(h, "shape");
  if (!shape || shape->size() == 0) return error("missing or invalid shape");
  const std::size_t n = std::size_t(shape->size());
  if (op != "predict_noise") {
    if (request.payload.size() != n) return error("payload does not match shape");
    return WireFrame{{{"id", id}, {"op", op}, {"shape", shape_json(*shape)}}, request.payload};
  }

  if (latent_shape != Shape{} && *shape != latent_shape) return error("latent shape " + to_string(*shape) + " not supported");
  const auto& ms = h.find("mask_shape");
  if (ms == h.end() || *ms != json::array({shape->height, shape->width})) return error("mask_shape must be [H, W]");
  if (request.payload.size() != 2 * n + std::size_t(shape->height) * std::size_t(shape->width))
    return error("payload must hold latent, image and mask");
  if (!h.contains("t") || !h["t"].is_number_integer()) return error("missing step t");
  const int t = h["t"].get<int>();
  static const NoiseSchedule sched = make_schedule(ScheduleKind::linear, 1000);
  if (t < 0 || t > sched.num_train_steps) return error("step t out of range");
  if (!h.contains("scales") || !h["scales"].is_object()) return error("missing scales");

  const double abar = sched.alpha_bar[std::size_t(t)];
  Shape out_shape = *shape;
  if (wrong_shape) out_shape.height -= 1;
  std::vector<float> eps(std::size_t(out_shape.size()));
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double z = request.payload[i];
    eps[i] = emit_nan ? std::numeric_limits<float>::quiet_NaN()
                      : float(detail::implied_noise(z, detail::gaussian_posterior_mean(z, mu, sigma, abar), abar));
  }
  return WireFrame{{{"id", id}, {"op", op}, {"shape", shape_json(out_shape)}}, std::move(eps)};
}

namespace {

/// Reads exactly n bytes unless the wake pipe fires or the peer closes.
bool server_read(int fd, int wake_fd, std::uint8_t* data, std::size_t n) {
  while (n > 0) {
    pollfd p[2] = {{fd, POLLIN, 0}, {wake_fd, POLLIN, 0}};
    if (::poll(p, 2, -1) < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    if (p[1].revents) return false;
    const ssize_t got = ::recv(fd, data, n, 0);
    if (got < 0 && errno == EINTR) continue;
    if (got <= 0) return false;
    data += got;
    n -= std::size_t(got);
  }
  return true;
}

bool server_send(int fd, const WireFrame& f) {
  const auto bytes = encode_frame(f);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const ssize_t w = ::send(fd, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
    if (w < 0 && errno == EINTR) continue;
    if (w <= 0) return false;
    off += std::size_t(w);
  }
  return true;
}

}  // namespace

StubServer::StubServer(const std::string& endpoint, Options options) : options_(std::move(options)) {
  if (options_.reverse_batch < 1) throw ConfigError("stub server: reverse_batch must be positive");
  if (endpoint.rfind("unix:", 0) == 0) {
    unix_path_ = endpoint.substr(5);
    const sockaddr_un addr = unix_address(unix_path_);
    ::unlink(unix_path_.c_str());
    listen_fd_ = ::socket(AF_UNIX, SOCK_STREAM, 0);
    if (listen_fd_ < 0 || ::bind(listen_fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0)
      throw BackendError("stub server: cannot bind " + endpoint + ": " + error_text(errno));
    endpoint_ = endpoint;
  } else {
    const HostPort hp = split_host_port(endpoint.rfind("tcp:", 0) == 0 ? endpoint.substr(4) : endpoint);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(std::uint16_t(std::stoi(hp.port)));
    if (hp.host != "127.0.0.1" && hp.host != "localhost") throw ConfigError("stub server listens on 127.0.0.1 only");
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (listen_fd_ < 0 || ::bind(listen_fd_, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0)
      throw BackendError("stub server: cannot bind " + endpoint + ": " + error_text(errno));
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    endpoint_ = "tcp:127.0.0.1:" + std::to_string(ntohs(addr.sin_port));
  }
  if (::listen(listen_fd_, 4) != 0) throw BackendError("stub server: listen failed: " + error_text(errno));
  if (::pipe(wake_fd_) != 0) throw BackendError("stub server: pipe failed: " + error_text(errno));
  thread_ = std::thread([this] { run(); });
}

StubServer::~StubServer() {
  const char c = 'x';
  [[maybe_unused]] const ssize_t w = ::write(wake_fd_[1], &c, 1);
  if (thread_.joinable()) thread_.join();
  ::close(listen_fd_);
  ::close(wake_fd_[0]);
  ::close(wake_fd_[1]);
  if (!unix_path_.empty()) ::unlink(unix_path_.c_str());
}

long StubServer::requests_served() const {
  std::lock_guard lock(mutex_);
  return served_;
}

void StubServer::run() {
  for (;;) {
    pollfd p[2] = {{listen_fd_, POLLIN, 0}, {wake_fd_[0], POLLIN, 0}};
    if (::poll(p, 2, -1) < 0) {
      if (errno == EINTR) continue;
      return;
    }
    if (p[1].revents) return;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    std::deque<WireFrame> held;
    for (;;) {
      std::vector<std::uint8_t> bytes(4);
      if (!server_read(fd, wake_fd_[0], bytes.data(), 4)) break;
      const std::uint32_t hlen = get_u32_be(bytes.data());
      if (hlen > max_header_bytes) break;
      bytes.resize(4 + hlen);
      if (!server_read(fd, wake_fd_[0], bytes.data() + 4, hlen)) break;
      WireFrame response;
      bool ok = true;
      try {
        json header = json::parse(bytes.begin() + 4, bytes.end());
        const std::size_t n = header.is_object() ? payload_bytes(header) : 0;
        bytes.resize(4 + hlen + n);
        if (!server_read(fd, wake_fd_[0], bytes.data() + 4 + hlen, n)) break;
        std::size_t pos = 0;
        response = options_.model.handle(decode_frame(bytes, pos));
      } catch (const std::exception& e) {
        // The stream cannot be resynchronized after a bad header.
        server_send(fd, WireFrame{{{"id", nullptr}, {"error", std::string("malformed frame: ") + e.what()}}, {}});
        ok = false;
      }
      if (!ok) break;
      {
        std::lock_guard lock(mutex_);
        ++served_;
      }
      const bool hold = response.header.value("op", std::string()) != "handshake";
      held.push_back(std::move(response));
      if (hold && int(held.size()) < options_.reverse_batch) continue;
      while (!held.empty()) {
        if (options_.delay.count() > 0) std::this_thread::sleep_for(options_.delay);
        if (!server_send(fd, held.back())) break;
        held.pop_back();
      }
    }
    ::close(fd);
  }
}

}  // namespace gridfill
