#include <doctest.h>

#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "gridfill/grid.hpp"
#include "gridfill/remote.hpp"
#include "gridfill/train.hpp"

using namespace gridfill;
using namespace std::chrono_literals;
using nlohmann::json;

namespace {

const std::filesystem::path transcript_dir = std::filesystem::path(GRIDFILL_TEST_DATA_DIR) / "transcripts";

Tensor3<float> random_tensor(Shape s, Rng& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  Tensor3<float> t(s);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.values()[i] = n(rng);
  return t;
}

std::vector<std::uint8_t> concat(const std::vector<WireFrame>& frames) {
  std::vector<std::uint8_t> out;
  for (const WireFrame& f : frames) {
    const auto b = encode_frame(f);
    out.insert(out.end(), b.begin(), b.end());
  }
  return out;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), "missing golden file " << p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), std::streamsize(b.size()));
}

Conditioning<float> half_known(Shape s, Rng& rng) {
  Conditioning<float> c;
  c.image = random_tensor(s, rng);
  c.mask = Mask<float>::Zero(s.height, s.width);
  c.mask.leftCols(s.width / 2).setOnes();
  for (int y = 0; y < s.height; ++y)
    for (int x = s.width / 2; x < s.width; ++x)
      for (int k = 0; k < s.channels; ++k) c.image(y, x, k) = 0.0f;
  return c;
}

/// Request sequences of the golden transcripts, built with the client's
/// request builders from fixed seeds.
std::vector<std::pair<std::string, std::vector<WireFrame>>> transcript_cases() {
  Rng rng(2024);
  const Shape s{4, 4, 4};
  std::vector<std::pair<std::string, std::vector<WireFrame>>> cases;
  cases.push_back({"handshake", {make_handshake_request(1)}});
  const Tensor3<float> pixels = random_tensor({4, 6, 3}, rng);
  cases.push_back({"codec", {make_codec_request(2, "encode", pixels), make_codec_request(3, "decode", pixels)}});
  Conditioning<float> c = half_known(s, rng);
  Conditioning<float> texted = c;
  texted.text = "a wooden chair";
  cases.push_back({"predict_noise",
                   {make_predict_request(4, random_tensor(s, rng), 400, c, {1.5, 0.0}),
                    make_predict_request(5, random_tensor(s, rng), 999, texted, {1.5, 7.5}),
                    make_predict_request(6, random_tensor(s, rng), 0, Conditioning<float>{}, {0.0, 0.0})}});
  WireFrame bad_payload = make_codec_request(8, "decode", pixels);
  bad_payload.payload.pop_back();
  WireFrame bad_mask = make_predict_request(9, random_tensor(s, rng), 10, c, {1.5, 0.0});
  bad_mask.header["mask_shape"] = {4, 3};
  WireFrame no_id = make_handshake_request(0);
  no_id.header.erase("id");
  cases.push_back({"errors",
                   {WireFrame{{{"id", 7}, {"op", "generate"}}, {}}, bad_payload, bad_mask, no_id,
                    make_predict_request(10, random_tensor(s, rng), 1001, c, {1.5, 0.0})}});
  return cases;
}

}  // namespace

TEST_CASE("frame layout is bit-exact") {
  const WireFrame f{{{"op", "x"}}, {1.0f, -2.5f}};
  const auto bytes = encode_frame(f);
  const std::string header = R"({"op":"x","payload_bytes":8})";
  REQUIRE(bytes.size() == 4 + header.size() + 8);
  CHECK(bytes[0] == 0);
  CHECK(bytes[1] == 0);
  CHECK(bytes[2] == 0);
  CHECK(bytes[3] == header.size());
  CHECK(std::string(bytes.begin() + 4, bytes.begin() + 4 + std::ptrdiff_t(header.size())) == header);
  const std::vector<std::uint8_t> payload(bytes.end() - 8, bytes.end());
  // 1.0f = 0x3F800000, -2.5f = 0xC0200000, little-endian.
  CHECK(payload == std::vector<std::uint8_t>{0x00, 0x00, 0x80, 0x3F, 0x00, 0x00, 0x20, 0xC0});
}

TEST_CASE("frames roundtrip and reject truncation") {
  Rng rng(5);
  std::vector<WireFrame> frames;
  for (int k = 0; k < 20; ++k) {
    WireFrame f{{{"id", k}, {"op", "encode"}, {"note", std::string(std::size_t(k), 'q')}}, {}};
    const auto t = random_tensor({1 + k % 3, 2, 3}, rng);
    f.payload.assign(t.values().data(), t.values().data() + t.size());
    if (k == 3) f.payload = {-0.0f, std::numeric_limits<float>::denorm_min(), std::numeric_limits<float>::max()};
    frames.push_back(f);
  }
  const auto bytes = concat(frames);
  const auto back = decode_frames(bytes);
  REQUIRE(back.size() == frames.size());
  for (std::size_t k = 0; k < frames.size(); ++k) {
    CHECK(back[k].payload.size() == frames[k].payload.size());
    CHECK(std::memcmp(back[k].payload.data(), frames[k].payload.data(), 4 * frames[k].payload.size()) == 0);
    CHECK(back[k].header["note"] == frames[k].header["note"]);
  }
  for (std::size_t cut : {std::size_t(2), std::size_t(10), bytes.size() - 1}) {
    const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + std::ptrdiff_t(cut));
    CHECK_THROWS_AS(decode_frames(part), BackendError);
  }
  std::vector<std::uint8_t> junk = {0, 0, 0, 3, '{', '{', '{'};
  CHECK_THROWS_AS(decode_frames(junk), BackendError);
  junk = {0, 0, 0, 2, '[', ']'};
  CHECK_THROWS_AS(decode_frames(junk), BackendError);
  junk = {0xFF, 0, 0, 0};
  CHECK_THROWS_AS(decode_frames(junk), BackendError);
  const std::string odd = R"({"payload_bytes":3})";
  junk = {0, 0, 0, std::uint8_t(odd.size())};
  junk.insert(junk.end(), odd.begin(), odd.end());
  junk.insert(junk.end(), {1, 2, 3});
  CHECK_THROWS_AS(decode_frames(junk), BackendError);
}

TEST_CASE("golden transcripts") {
  const StubModel model;
  const bool regenerate = std::getenv("GRIDFILL_REGENERATE_TRANSCRIPTS") != nullptr;
  for (const auto& [name, requests] : transcript_cases()) {
    CAPTURE(name);
    std::vector<WireFrame> responses;
    for (const WireFrame& r : requests) {
      std::size_t pos = 0;
      const auto bytes = encode_frame(r);
      responses.push_back(model.handle(decode_frame(bytes, pos)));
    }
    const auto req_path = transcript_dir / (name + ".req.bin");
    const auto resp_path = transcript_dir / (name + ".resp.bin");
    if (regenerate) {
      std::filesystem::create_directories(transcript_dir);
      write_bytes(req_path, concat(requests));
      write_bytes(resp_path, concat(responses));
    }
    const auto golden_req = read_bytes(req_path);
    const auto golden_resp = read_bytes(resp_path);
    CHECK(concat(requests) == golden_req);

    // Replaying the recorded requests through the stub reproduces the
    // recorded responses byte for byte.
    std::vector<WireFrame> replay;
    for (const WireFrame& r : decode_frames(golden_req)) replay.push_back(model.handle(r));
    CHECK(concat(replay) == golden_resp);

    const auto parsed = decode_frames(golden_resp);
    REQUIRE(parsed.size() == requests.size());
    for (std::size_t k = 0; k < parsed.size(); ++k) {
      const json& h = parsed[k].header;
      if (name == "errors") {
        CHECK(h.contains("error"));
        if (requests[k].header.contains("id")) CHECK(h["id"] == requests[k].header["id"]);
        continue;
      }
      const std::string op = requests[k].header["op"];
      CHECK(h["op"] == op);
      CHECK(h["id"] == requests[k].header["id"]);
      if (op == "handshake") {
        CHECK(h["version"] == 1);
        continue;
      }
      const auto t = parse_tensor_response(parsed[k], h["id"].get<std::int64_t>(), op, std::nullopt);
      if (op != "predict_noise")
        CHECK(std::memcmp(t.values().data(), requests[k].payload.data(), 4 * std::size_t(t.size())) == 0);
      else
        CHECK(t.shape() == Shape{4, 4, 4});
    }
  }
}

TEST_CASE("request layout") {
  Rng rng(8);
  const Shape s{2, 3, 4};
  const Tensor3<float> z = random_tensor(s, rng);
  Conditioning<float> c = half_known(s, rng);
  const WireFrame f = make_predict_request(3, z, 17, c, {1.5, 0.25});
  CHECK(f.header["shape"] == json::array({2, 3, 4}));
  CHECK(f.header["mask_shape"] == json::array({2, 3}));
  CHECK(f.header["t"] == 17);
  CHECK(f.header["scales"]["s_image"] == 1.5);
  CHECK(f.header["scales"]["s_text"] == 0.25);
  CHECK(f.header["text"].is_null());
  REQUIRE(f.payload.size() == 24 + 24 + 6);
  for (int i = 0; i < 24; ++i) {
    CHECK(f.payload[std::size_t(i)] == z.values()[i]);
    CHECK(f.payload[std::size_t(24 + i)] == c.image.values()[i]);
  }
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 3; ++x) CHECK(f.payload[std::size_t(48 + y * 3 + x)] == c.mask(y, x));

  c.drop_image = true;
  c.text = "lamp";
  const WireFrame dropped = make_predict_request(4, z, 17, c, {});
  for (std::size_t i = 24; i < dropped.payload.size(); ++i) CHECK(dropped.payload[i] == 0.0f);
  CHECK(dropped.header["text"] == "lamp");
  c.drop_text = true;
  CHECK(make_predict_request(4, z, 17, c, {}).header["text"].is_null());
}

TEST_CASE("remote backend against the stub server") {
  const auto sock = (std::filesystem::temp_directory_path() / ("gridfill_stub_" + std::to_string(::getpid()) + ".sock")).string();
  const auto sched = make_schedule(ScheduleKind::linear, 1000);
  Rng rng(12);

  for (const std::string endpoint : {"unix:" + sock, std::string("tcp:127.0.0.1:0")}) {
    CAPTURE(endpoint);
    StubServer server(endpoint, {});
    RemoteBackend remote(server.endpoint(), {.timeout = 5000ms, .window = 4});
    CHECK(remote.descriptor().name == "remote");
    CHECK(remote.descriptor().applies_guidance);
    CHECK(remote.scale_factor() == 1);

    {
      // Codec roundtrip is bit-exact.
      Tensor3<float> x = random_tensor({5, 7, 3}, rng);
      x.values()[0] = -0.0f;
      x.values()[1] = std::numeric_limits<float>::denorm_min();
      const Tensor3<float> back = remote.decode(remote.encode(x));
      CHECK(back.shape() == x.shape());
      CHECK(std::memcmp(back.values().data(), x.values().data(), 4 * std::size_t(x.size())) == 0);
    }

    {
      // Predictions match the analytic prior.
      const AnalyticGaussianBackend<double> local(0.5, 0.5, sched);
      const Shape s{6, 6, 4};
      for (int t : {0, 1, 250, 600, 999}) {
        const Tensor3<float> z = random_tensor(s, rng);
        const auto got = remote.predict_guided(z, t, half_known(s, rng), {1.5, 0.0});
        const auto want = local.predict_noise(z.cast<double>(), t, Conditioning<double>{});
        CHECK((got.values().cast<double>() - want.values()).abs().maxCoeff() < 1e-5);
      }
    }

    {
      // Sampling through the wire matches local sampling.
      const AnalyticGaussianBackend<float> local(0.5, 0.5, sched);
      LatentBatch<float> batch;
      for (int v = 0; v < 4; ++v) {
        const Shape s{4, 4, 3};
        Conditioning<float> c = half_known(s, rng);
        batch.push_back(random_tensor(s, rng), c, v);
      }
      JointSampleConfig cfg;
      cfg.m_repeats = 2;
      cfg.num_steps = 5;
      cfg.seed = 3;
      const auto a = joint_inpaint<float>(remote, batch, cfg, sched);
      const auto b = joint_inpaint<float>(local, batch, cfg, sched);
      for (int v = 0; v < 4; ++v) CHECK((a[v].values() - b[v].values()).abs().maxCoeff() < 1e-3);
    }
  }
}

TEST_CASE("pipelined responses are matched by id") {
  const auto sched = make_schedule(ScheduleKind::linear, 1000);
  Rng rng(31);
  StubServer server("tcp:127.0.0.1:0", {.reverse_batch = 4});
  RemoteBackend remote(server.endpoint(), {.timeout = 5000ms, .window = 4});
  const Shape s{4, 4, 4};
  std::vector<Tensor3<float>> zs;
  std::vector<Conditioning<float>> cs;
  for (int k = 0; k < 8; ++k) {
    zs.push_back(random_tensor(s, rng));
    cs.push_back(half_known(s, rng));
  }
  const auto got = remote.predict_guided_many(zs, 300, cs, {1.5, 0.0});
  const AnalyticGaussianBackend<double> local(0.5, 0.5, sched);
  REQUIRE(got.size() == 8);
  for (int k = 0; k < 8; ++k) {
    const auto want = local.predict_noise(zs[k].cast<double>(), 300, Conditioning<double>{});
    CHECK((got[k].values().cast<double>() - want.values()).abs().maxCoeff() < 1e-5);
  }
  // 8 predictions plus the handshake.
  CHECK(server.requests_served() == 9);
}

TEST_CASE("remote failures surface as backend errors") {
  const Shape s{4, 4, 4};
  Rng rng(44);
  const Tensor3<float> z = random_tensor(s, rng);

  SUBCASE("timeout") {
    StubServer server("tcp:127.0.0.1:0", {.delay = 400ms});
    CHECK_THROWS_WITH_AS(RemoteClient(connect_endpoint(server.endpoint()), {.timeout = 50ms}),
                         doctest::Contains("timed out"), BackendError);
  }

  SUBCASE("window smaller than the server's batch stalls into a timeout") {
    StubServer server("tcp:127.0.0.1:0", {.reverse_batch = 2});
    RemoteBackend remote(server.endpoint(), {.timeout = 100ms, .window = 1});
    CHECK_THROWS_WITH_AS(remote.predict_guided(z, 10, {}, {}), doctest::Contains("timed out"), BackendError);
  }

  SUBCASE("non-finite values") {
    StubServer server("tcp:127.0.0.1:0", {.model = {.emit_nan = true}});
    RemoteBackend remote(server.endpoint(), {.timeout = 5000ms});
    CHECK_THROWS_WITH_AS(remote.predict_guided(z, 10, {}, {}), doctest::Contains("non-finite"), BackendError);
  }

  SUBCASE("wrong shape never reaches the caller") {
    StubServer server("tcp:127.0.0.1:0", {.model = {.wrong_shape = true}});
    RemoteBackend remote(server.endpoint(), {.timeout = 5000ms});
    CHECK_THROWS_WITH_AS(remote.predict_guided(z, 10, {}, {}), doctest::Contains("expected shape"), BackendError);
  }

  SUBCASE("version mismatch") {
    StubServer server("tcp:127.0.0.1:0", {.model = {.version = 2}});
    CHECK_THROWS_WITH_AS(RemoteBackend(server.endpoint(), {.timeout = 5000ms}), doctest::Contains("version 2"),
                         BackendError);
  }

  SUBCASE("server error messages are passed through") {
    StubServer server("tcp:127.0.0.1:0", {});
    RemoteClient client(connect_endpoint(server.endpoint()), {.timeout = 5000ms});
    const WireFrame r = client.call(WireFrame{{{"op", "generate"}}, {}});
    CHECK_THROWS_WITH_AS(parse_tensor_response(r, r.header["id"].get<std::int64_t>(), "generate", std::nullopt),
                         doctest::Contains("unknown op 'generate'"), BackendError);
    // The connection stays usable after an error frame.
    CHECK(client.call(make_handshake_request(0)).header["version"] == 1);
  }

  SUBCASE("latent shape advertised by the server is enforced locally") {
    StubServer server("tcp:127.0.0.1:0", {.model = {.latent_shape = {8, 8, 4}}});
    RemoteBackend remote(server.endpoint(), {.timeout = 5000ms});
    CHECK(remote.descriptor().latent_shape == Shape{8, 8, 4});
    CHECK_THROWS_AS(remote.predict_guided(z, 10, {}, {}), ShapeError);
  }

  SUBCASE("unreachable endpoints") {
    CHECK_THROWS_AS(connect_endpoint("unix:/nonexistent/dir/x.sock"), BackendError);
    CHECK_THROWS_AS(connect_endpoint("tcp:127.0.0.1:1"), BackendError);
    CHECK_THROWS_AS(connect_endpoint("nonsense"), ConfigError);
  }
}

TEST_CASE("dataset update through the remote backend keeps known pixels") {
  SyntheticSpec spec;
  spec.views = 4;
  spec.width = 32;
  spec.height = 32;
  spec.field_resolution = 16;
  spec.render_samples = 32;
  const auto scene = make_synthetic_scene(spec);
  TrainConfig cfg;
  cfg.batch_views = 4;
  cfg.m_repeats = 1;
  cfg.ddim_steps = 3;
  cfg.field_resolution = 8;
  cfg.samples = 16;
  TrainState st{.field = RadianceField<float>(Eigen::Vector3i::Constant(8), scene.dataset.aabb->cast<float>(),
                                              scene.dataset.background, -1.0f, 0.0f),
                .dataset = scene.dataset};
  st.inpainted.assign(4, false);
  const auto sched = make_schedule(ScheduleKind::linear, 1000);
  StubServer server("tcp:127.0.0.1:0", {});
  RemoteBackend remote(server.endpoint(), {.timeout = 5000ms});
  const auto diag = dataset_update(st, cfg, remote, remote, sched, 0.7);
  CHECK_FALSE(diag.failed);
  CHECK(known_pixel_checksum(st.dataset) == known_pixel_checksum(scene.dataset));
  CHECK_FALSE((st.dataset.frames[0].image.values() == scene.dataset.frames[0].image.values()).all());
}
