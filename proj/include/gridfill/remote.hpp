#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "gridfill/backend.hpp"

namespace gridfill {

inline constexpr int protocol_version = 1;

/// One protocol message: a JSON header and a float32 payload. On the wire:
/// uint32 big-endian header length, UTF-8 JSON header, little-endian float32
/// payload of header["payload_bytes"] bytes.
struct WireFrame {
  nlohmann::json header = nlohmann::json::object();
  std::vector<float> payload;

  bool operator==(const WireFrame&) const = default;
};

std::vector<std::uint8_t> encode_frame(const WireFrame& frame);

/// Parses one frame starting at bytes[pos] and advances pos. Throws
/// BackendError on truncated or malformed input.
WireFrame decode_frame(const std::vector<std::uint8_t>& bytes, std::size_t& pos);

/// Parses a whole byte stream of back-to-back frames.
std::vector<WireFrame> decode_frames(const std::vector<std::uint8_t>& bytes);

/// Byte stream with a read deadline.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual void write_all(const std::uint8_t* data, std::size_t n) = 0;
  /// Reads exactly n bytes or throws BackendError on timeout or EOF.
  virtual void read_exact(std::uint8_t* data, std::size_t n, std::chrono::milliseconds timeout) = 0;
};

/// Connects to "unix:/path/to.sock" or "tcp:host:port" (also plain "host:port").
std::unique_ptr<Transport> connect_endpoint(const std::string& endpoint);

void write_frame(Transport& t, const WireFrame& f);
WireFrame read_frame(Transport& t, std::chrono::milliseconds timeout);

struct HandshakeInfo {
  int version = 0;
  Shape latent_shape{};
  bool supports_text = false;
  bool deterministic = true;
  int scale_factor = 1;
};

/// Request builders shared by the client and the transcript generator.
WireFrame make_handshake_request(std::int64_t id);
WireFrame make_codec_request(std::int64_t id, const std::string& op, const Tensor3<float>& x);
WireFrame make_predict_request(std::int64_t id, const Tensor3<float>& z_t, int t, const Conditioning<float>& cond,
                           const GuidanceScales& scales);

/// Checks a response against its request: matching id and op, no error field,
/// payload length equal to the declared shape, finite values. Returns the
/// payload as a tensor of the declared shape.
Tensor3<float> parse_tensor_response(const WireFrame& response, std::int64_t id, const std::string& op,
                                     const std::optional<Shape>& expected);

/// Pipelined protocol client. Requests carry increasing ids; responses are
/// matched by id in whatever order they arrive. Thread-safe.
class RemoteClient {
 public:
  struct Options {
    std::chrono::milliseconds timeout{30000};
    /// Maximum requests in flight.
    int window = 8;
  };

  RemoteClient(std::unique_ptr<Transport> transport, Options options);
  RemoteClient(std::unique_ptr<Transport> transport) : RemoteClient(std::move(transport), Options{}) {}

  const HandshakeInfo& info() const { return info_; }

  /// Sends requests (ids are assigned here) keeping at most `window` in flight
  /// and returns the responses in request order.
  std::vector<WireFrame> call_many(std::vector<WireFrame> requests);
  WireFrame call(WireFrame request);

 private:
  WireFrame receive(std::int64_t id);

  std::unique_ptr<Transport> transport_;
  Options options_;
  HandshakeInfo info_;
  std::int64_t next_id_ = 1;
  std::map<std::int64_t, WireFrame> pending_;
  std::mutex mutex_;
};

/// Denoiser and codec served by a remote model. Guided predictions are a
/// single request; the server combines the guidance branches.
class RemoteBackend final : public DenoiserBackend<float>, public Codec {
 public:
  explicit RemoteBackend(std::shared_ptr<RemoteClient> client) : client_(std::move(client)) {}
  RemoteBackend(const std::string& endpoint, RemoteClient::Options options);

  BackendDescriptor descriptor() const override;
  Tensor3<float> predict_noise(const Tensor3<float>& z_t, int t, const Conditioning<float>& cond) const override;
  Tensor3<float> predict_guided(const Tensor3<float>& z_t, int t, const Conditioning<float>& cond,
                                const GuidanceScales& scales) const override;
  /// Pipelined guided predictions for several latents.
  std::vector<Tensor3<float>> predict_guided_many(const std::vector<Tensor3<float>>& z_t, int t,
                                                  const std::vector<Conditioning<float>>& cond,
                                                  const GuidanceScales& scales) const;

  Tensor3<float> encode(const Tensor3<float>& pixels) const override;
  Tensor3<float> decode(const Tensor3<float>& latent) const override;
  int scale_factor() const override { return client_->info().scale_factor; }

 private:
  std::shared_ptr<RemoteClient> client_;
};

/// Deterministic model behind the stub server: identity codec and the
/// analytic Gaussian noise prediction on the latent (conditioning is checked
/// for shape, then ignored).
struct StubModel {
  double mu = 0.5;
  double sigma = 0.5;
  Shape latent_shape{};
  /// Answer predict_noise with NaNs.
  bool emit_nan = false;
  /// Answer predict_noise with a tensor one row short.
  bool wrong_shape = false;
  int version = protocol_version;

  /// Answers one request; malformed requests get an error frame.
  WireFrame handle(const WireFrame& request) const;
};

/// Serves StubModel over a socket on a background thread, one connection at a
/// time. Useful for tests and for exercising the client without a model.
class StubServer {
 public:
  struct Options {
    StubModel model;
    /// Sleep before every response.
    std::chrono::milliseconds delay{0};
    /// Collect this many requests and answer them in reverse order; a
    /// handshake is answered at once.
    int reverse_batch = 1;
  };

  /// Listens on "unix:/path" or "tcp:127.0.0.1:0" (port 0 picks a free port).
  StubServer(const std::string& endpoint, Options options);
  ~StubServer();
  StubServer(const StubServer&) = delete;
  StubServer& operator=(const StubServer&) = delete;

  /// Endpoint string a client can connect to.
  const std::string& endpoint() const { return endpoint_; }
  long requests_served() const;

 private:
  void run();

  Options options_;
  std::string endpoint_;
  std::string unix_path_;
  int listen_fd_ = -1;
  int wake_fd_[2] = {-1, -1};
  std::thread thread_;
  mutable std::mutex mutex_;
  long served_ = 0;
};

}  // namespace gridfill
