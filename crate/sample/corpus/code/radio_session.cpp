#include <cstddef>
#include <vector>

namespace sample_ran {

constexpr std::size_t default_stream_buffer_size = 614400;

class radio_session
{
public:
  explicit radio_session(std::size_t nof_channels, std::size_t buffer_size = default_stream_buffer_size) :
    buffers(nof_channels, std::vector<float>(buffer_size * 2))
  {
  }

  std::size_t nof_channels() const { return buffers.size(); }

  // Copies interleaved IQ samples for one channel into the transmit buffer.
  std::size_t write_samples(std::size_t channel, const float* iq, std::size_t nof_samples)
  {
    std::vector<float>& dst = buffers[channel];
    std::size_t         n   = nof_samples * 2 < dst.size() ? nof_samples * 2 : dst.size();
    for (std::size_t i = 0; i != n; ++i) {
      dst[i] = iq[i];
    }
    return n / 2;
  }

  void start_streaming() { streaming = true; }
  void stop_streaming() { streaming = false; }

private:
  std::vector<std::vector<float>> buffers;
  bool                            streaming = false;
};

} // namespace sample_ran
