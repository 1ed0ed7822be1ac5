#include <gtest/gtest.h>

#include <random>
#include <thread>

#include "cadrag/text_util.hpp"
#include "cadrag/vlm_gateway.hpp"
#include "test_support.hpp"

using namespace cadrag;
using namespace std::chrono_literals;
using cadrag::testing::TempDir;

namespace {

ChatRequest text_request(std::string text) {
  ChatRequest r;
  r.model_name = "m";
  r.add_text(std::move(text));
  return r;
}

/// Fails with `status` for the first `failures` calls, then answers "ok".
struct FlakyBackend : ChatBackend {
  int failures;
  int status;
  int calls = 0;
  FlakyBackend(int f, int s = 503) : failures(f), status(s) {}
  BackendReply complete(const ChatRequest&) override {
    if (++calls <= failures) throw TransportError::from_status(status, "scripted");
    return {"ok", std::nullopt};
  }
};

}  // namespace

TEST(SendChat, ImmediateSuccess) {
  FlakyBackend b(0);
  VirtualClock clock;
  auto r = send_chat(text_request("hi"), b, {}, clock);
  EXPECT_EQ(r.text, "ok");
  EXPECT_EQ(r.attempt_count, 1);
  EXPECT_TRUE(clock.sleeps().empty());
}

TEST(SendChat, TwoFailuresThenSuccessWaitsOneThenTwoSeconds) {
  FlakyBackend b(2);
  VirtualClock clock;
  auto r = send_chat(text_request("hi"), b, {}, clock);
  EXPECT_EQ(r.attempt_count, 3);
  EXPECT_EQ(clock.sleeps(), (std::vector<std::chrono::milliseconds>{1000ms, 2000ms}));
}

TEST(SendChat, FourFailuresExhaustAfterFourAttempts) {
  FlakyBackend b(4, 429);
  VirtualClock clock;
  try {
    send_chat(text_request("hi"), b, {}, clock);
    FAIL();
  } catch (const RetryExhaustedError& e) {
    EXPECT_EQ(e.attempts(), 4);
    EXPECT_EQ(e.last_status(), 429);
  }
  EXPECT_EQ(b.calls, 4);
  EXPECT_EQ(clock.sleeps(), (std::vector<std::chrono::milliseconds>{1000ms, 2000ms, 4000ms}));
}

TEST(SendChat, NonRetryableFailsImmediately) {
  for (int status : {400, 401, 403, 404, 422}) {
    FlakyBackend b(1, status);
    VirtualClock clock;
    try {
      send_chat(text_request("hi"), b, {}, clock);
      FAIL();
    } catch (const RetryExhaustedError&) {
      FAIL() << "status " << status << " must not retry";
    } catch (const TransportError& e) {
      EXPECT_EQ(e.status(), status);
    }
    EXPECT_EQ(b.calls, 1);
    EXPECT_TRUE(clock.sleeps().empty());
  }
}

TEST(SendChat, RetryClassification) {
  for (int s : {0, 408, 429, 500, 502, 503, 504}) EXPECT_TRUE(TransportError::is_retryable_status(s));
  for (int s : {400, 401, 403, 404, 413, 422}) EXPECT_FALSE(TransportError::is_retryable_status(s));
}

TEST(SendChat, DelaysFollowGeometricScheduleForAnyPolicy) {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    RetryPolicy p;
    p.max_retries = static_cast<int>(rng() % 6);
    p.base_delay = std::chrono::milliseconds(1 + rng() % 500);
    p.multiplier = 1.0 + (rng() % 30) / 10.0;
    int fails = static_cast<int>(rng() % 8);
    FlakyBackend b(fails);
    VirtualClock clock;
    int attempts = 0;
    try {
      attempts = send_chat(text_request("x"), b, p, clock).attempt_count;
    } catch (const RetryExhaustedError& e) {
      attempts = e.attempts();
    }
    EXPECT_LE(attempts, p.max_retries + 1);
    auto sleeps = clock.sleeps();
    for (std::size_t i = 0; i < sleeps.size(); ++i) {
      auto expected = std::llround(p.base_delay.count() * std::pow(p.multiplier, i));
      EXPECT_NEAR(sleeps[i].count(), expected, 1);
    }
  }
}

TEST(ParallelMap, SequentialWithOneWorker) {
  std::vector<int> order;
  std::vector<int> items{1, 2, 3, 4, 5};
  auto r = parallel_map(items, 1, [&](int x) {
    order.push_back(x);
    return x * 2;
  });
  EXPECT_EQ(order, items);
  for (std::size_t i = 0; i < items.size(); ++i) EXPECT_EQ(*r[i].value, items[i] * 2);
}

TEST(ParallelMap, BoundedConcurrency) {
  std::atomic<int> in_flight{0}, peak{0};
  std::vector<int> items(10);
  auto r = parallel_map(items, 4, [&](int) {
    int now = ++in_flight;
    int p = peak.load();
    while (now > p && !peak.compare_exchange_weak(p, now)) {}
    std::this_thread::sleep_for(5ms);
    --in_flight;
    return 0;
  });
  EXPECT_EQ(r.size(), 10u);
  EXPECT_LE(peak.load(), 4);
  EXPECT_GE(peak.load(), 1);
}

TEST(ParallelMap, FailureIsolatedToItsSlot) {
  std::vector<int> items{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  auto r = parallel_map(items, 3, [](int x) {
    if (x == 6) throw std::runtime_error("boom");
    return x;
  });
  int ok = 0;
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (i == 6) {
      EXPECT_FALSE(r[i].ok());
      EXPECT_EQ(r[i].error, "boom");
    } else {
      ok += r[i].ok();
    }
  }
  EXPECT_EQ(ok, 9);
}

TEST(ParallelMap, EqualsSequentialMapForAnyWorkerCount) {
  std::vector<int> items(37);
  for (int i = 0; i < 37; ++i) items[i] = i * 7 % 13;
  for (std::size_t k = 1; k <= 9; ++k) {
    auto r = parallel_map(items, k, [](int x) { return x * x + 1; });
    for (std::size_t i = 0; i < items.size(); ++i) EXPECT_EQ(*r[i].value, items[i] * items[i] + 1);
  }
  EXPECT_THROW(parallel_map(items, 0, [](int x) { return x; }), PreconditionError);
}

TEST(Attachments, PngDataUrlRoundTrip) {
  TempDir tmp;
  cadrag::testing::write_png(tmp / "a.png", 7);
  auto url = encode_image_attachment(tmp / "a.png");
  EXPECT_EQ(url.rfind("data:image/png;base64,", 0), 0u);
  EXPECT_EQ(decode_data_url(url).bytes, read_file(tmp / "a.png"));
  write_file(tmp / "b.JPG", "\xff\xd8\xff");
  EXPECT_EQ(encode_image_attachment(tmp / "b.JPG").rfind("data:image/jpeg;base64,", 0), 0u);
  write_file(tmp / "c.txt", "x");
  EXPECT_THROW(encode_image_attachment(tmp / "c.txt"), FormatError);
  EXPECT_THROW(encode_image_attachment(tmp / "missing.png"), IoError);
}

TEST(Attachments, Base64RoundTripRandomBytes) {
  std::mt19937 rng(8);
  for (int i = 0; i < 300; ++i) {
    std::string s(rng() % 64, '\0');
    for (auto& c : s) c = static_cast<char>(rng() % 256);
    EXPECT_EQ(base64_decode(base64_encode(s)), s);
  }
  EXPECT_THROW(base64_decode("abc"), FormatError);
  EXPECT_THROW(base64_decode("ab!d"), FormatError);
}

TEST(Fingerprint, StableAndSensitive) {
  auto a = text_request("hello");
  EXPECT_EQ(request_fingerprint(a), request_fingerprint(text_request("hello")));
  EXPECT_EQ(request_fingerprint(a).size(), 64u);
  EXPECT_NE(request_fingerprint(a), request_fingerprint(text_request("hellp")));
  auto b = a;
  b.model_name = "other";
  EXPECT_NE(request_fingerprint(a), request_fingerprint(b));
  auto c = a;
  c.add_image("data:image/png;base64,AAAA");
  EXPECT_NE(request_fingerprint(a), request_fingerprint(c));
  // Block boundaries matter.
  ChatRequest d;
  d.model_name = "m";
  d.add_text("hel");
  d.add_text("lo");
  EXPECT_NE(request_fingerprint(a), request_fingerprint(d));
  // Known value: the fingerprint is part of the fixture format.
  EXPECT_EQ(request_fingerprint(a),
            sha256_hex(R"(["m",null,["text","hello"]])"));
}

TEST(Replay, HitMissAndNearest) {
  auto req = text_request("question one");
  ReplayFixture fx({{request_fingerprint(req), "answer one"}});
  ReplayBackend backend(fx);
  EXPECT_EQ(send_chat(req, backend).text, "answer one");
  try {
    send_chat(text_request("question onf"), backend);
    FAIL();
  } catch (const ReplayMissError& e) {
    EXPECT_EQ(e.nearest(), request_fingerprint(req));
    EXPECT_FALSE(e.retryable());
  }
  EXPECT_EQ(backend.hits(), 1u);
  EXPECT_EQ(backend.misses(), 1u);
}

TEST(Replay, RecordThenReplayReproducesSession) {
  TempDir tmp;
  int n = 0;
  FunctionBackend live([&](const ChatRequest& r) {
    return BackendReply{"reply " + std::to_string(++n) + " to " + r.joined_text(), std::nullopt};
  });
  RecordingBackend rec(live);
  std::vector<std::string> session;
  for (auto q : {"a", "b", "c"}) session.push_back(send_chat(text_request(q), rec).text);
  rec.fixture().save(tmp / "fx.jsonl");

  ReplayBackend replay(ReplayFixture::load(tmp / "fx.jsonl"));
  std::vector<std::string> again;
  for (auto q : {"a", "b", "c"}) again.push_back(send_chat(text_request(q), replay).text);
  EXPECT_EQ(again, session);
  EXPECT_EQ(n, 3);
}

TEST(Replay, DuplicateFingerprintsRejected) {
  EXPECT_ANY_THROW(ReplayFixture({{"ab", "x"}, {"ab", "y"}}));
}

TEST(Request, Validation) {
  ChatRequest empty;
  EXPECT_THROW(empty.validate(), PreconditionError);
  auto r = text_request("x");
  r.add_image("not a data url");
  EXPECT_THROW(r.validate(), PreconditionError);
  FlakyBackend b(0);
  EXPECT_THROW(send_chat(empty, b), PreconditionError);
  EXPECT_EQ(b.calls, 0);
}
